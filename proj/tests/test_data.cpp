#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "bsentinel/dataset.hpp"
#include "bsentinel/image_io.hpp"
#include "bsentinel/pipeline.hpp"

using namespace bsentinel;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("bsentinel_test_data_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> cifar_record(std::uint8_t label, std::uint8_t base) {
    std::vector<std::uint8_t> rec(kCifarRecordBytes);
    rec[0] = label;
    for (std::size_t i = 0; i < 3072; ++i) rec[1 + i] = static_cast<std::uint8_t>((base + i) % 256);
    return rec;
}

std::map<AttackKind, std::size_t> attack_counts(const Dataset& d) {
    std::map<AttackKind, std::size_t> m;
    for (const auto& s : d.samples)
        if (!s.provenance.is_clean()) ++m[*s.provenance.attack()];
    return m;
}

}  // namespace

TEST(Cifar, SingleRecord) {
    auto dir = scratch_dir("cifar1");
    write_bytes(dir / "one.bin", cifar_record(7, 0));
    auto d = load_cifar10_binary(dir / "one.bin");
    ASSERT_EQ(d.size(), 1u);
    EXPECT_EQ(d.shape, (ImageShape{3, 32, 32}));
    EXPECT_EQ(d.samples[0].class_label, 7u);
    // byte i of the raster is channel i/1024, row (i%1024)/32, col i%32
    EXPECT_FLOAT_EQ(d.samples[0].image.at(0, 0, 1), 1.0f / 255.0f);
    EXPECT_FLOAT_EQ(d.samples[0].image.at(1, 0, 0), static_cast<float>(1024 % 256) / 255.0f);
    EXPECT_FLOAT_EQ(d.samples[0].image.at(2, 1, 3), static_cast<float>((2048 + 35) % 256) / 255.0f);
}

TEST(Cifar, MultipleFilesConcatenate) {
    auto dir = scratch_dir("cifar_multi");
    std::vector<fs::path> files;
    for (int f = 0; f < 5; ++f) {
        std::vector<std::uint8_t> bytes;
        for (int r = 0; r < 4; ++r) {
            auto rec = cifar_record(static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(f));
            bytes.insert(bytes.end(), rec.begin(), rec.end());
        }
        files.push_back(dir / ("data_batch_" + std::to_string(f + 1) + ".bin"));
        write_bytes(files.back(), bytes);
    }
    auto d = load_cifar10_binary(files);
    EXPECT_EQ(d.size(), 20u);
    EXPECT_EQ(d.samples[19].id, 19u);
}

TEST(Cifar, BadLabelAndTruncation) {
    auto dir = scratch_dir("cifar_bad");
    write_bytes(dir / "bad.bin", cifar_record(255, 0));
    EXPECT_THROW(load_cifar10_binary(dir / "bad.bin"), DataError);
    auto rec = cifar_record(1, 0);
    rec.pop_back();
    write_bytes(dir / "short.bin", rec);
    EXPECT_THROW(load_cifar10_binary(dir / "short.bin"), DataError);
    EXPECT_THROW(load_cifar10_binary(dir / "absent.bin"), IoError);
}

TEST(ImageDirectory, CsvOrderAndResize) {
    auto dir = scratch_dir("imgdir");
    for (int i = 0; i < 3; ++i) {
        ImageTensor img(ImageShape{3, 64, 64}, static_cast<float>(i) / 4.0f);
        write_png(img, dir / ("img" + std::to_string(i) + ".png"));
    }
    std::ofstream(dir / "labels.csv") << "filename,label\nimg2.png,5\nimg0.png,1\nimg1.png,3\n";
    auto d = load_image_directory(dir, dir / "labels.csv", ImageShape{}, 10);
    ASSERT_EQ(d.size(), 3u);
    EXPECT_EQ(d.samples[0].class_label, 5u);
    EXPECT_EQ(d.samples[1].class_label, 1u);
    EXPECT_EQ(d.samples[0].image.shape(), (ImageShape{3, 32, 32}));
    EXPECT_NEAR(d.samples[0].image.at(1, 10, 10), 0.5f, 1.0f / 255.0f);
}

TEST(ImageDirectory, MissingFileNamesRow) {
    auto dir = scratch_dir("imgdir_missing");
    write_png(ImageTensor(ImageShape{3, 8, 8}, 0.5f), dir / "a.png");
    std::ofstream(dir / "labels.csv") << "filename,label\na.png,0\nb.png,1\n";
    try {
        load_image_directory(dir, dir / "labels.csv", ImageShape{3, 8, 8}, 10);
        FAIL();
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos) << e.what();
    }
}

TEST(ImageDirectory, PpmDecodes) {
    auto dir = scratch_dir("ppm");
    std::string ppm = "P6\n# comment\n2 1\n255\n";
    ppm += std::string{'\xff', '\x00', '\x00', '\x00', '\x00', '\xff'};
    std::ofstream(dir / "x.ppm", std::ios::binary) << ppm;
    auto img = read_image(dir / "x.ppm");
    EXPECT_EQ(img.shape(), (ImageShape{3, 1, 2}));
    EXPECT_EQ(img.at(0, 0, 0), 1.0f);
    EXPECT_EQ(img.at(2, 0, 1), 1.0f);
    EXPECT_EQ(img.at(1, 0, 1), 0.0f);
}

TEST(Synthetic, BalancedAndDeterministic) {
    auto d = generate_synthetic_dataset(100, 10, ImageShape{}, 3);
    std::map<std::uint32_t, int> per;
    for (const auto& s : d.samples) ++per[s.class_label];
    EXPECT_EQ(per.size(), 10u);
    for (auto& [c, n] : per) EXPECT_EQ(n, 10);
    EXPECT_EQ(d, generate_synthetic_dataset(100, 10, ImageShape{}, 3));
    EXPECT_THROW(generate_synthetic_dataset(5, 10, ImageShape{}, 3), ConfigError);
}

TEST(Loo, ExactDivision) {
    auto d = generate_synthetic_dataset(1000, 10, ImageShape{3, 8, 8}, 1);
    auto plan = LooPlan::make(AttackKind::trojan_wm, 4);
    auto t = build_loo_training_set(d, plan, default_specs());
    EXPECT_EQ(t.size(), 2000u);
    EXPECT_EQ(count_provenance(t, Provenance::clean()), 1000u);
    auto counts = attack_counts(t);
    EXPECT_EQ(counts.size(), 5u);
    for (auto& [k, n] : counts) EXPECT_EQ(n, 200u);
    EXPECT_EQ(count_provenance(t, Provenance(AttackKind::trojan_wm)), 0u);
    check_detection_labels(t);
}

TEST(Loo, RemainderGoesToFirstAttacks) {
    auto d = generate_synthetic_dataset(1003, 10, ImageShape{3, 8, 8}, 1);
    auto plan = LooPlan::make(AttackKind::badnets_sq, 2);
    auto counts = attack_counts(build_loo_training_set(d, plan, default_specs()));
    EXPECT_EQ(counts[AttackKind::badnets_px], 201u);
    EXPECT_EQ(counts[AttackKind::trojan_sq], 201u);
    EXPECT_EQ(counts[AttackKind::trojan_wm], 201u);
    EXPECT_EQ(counts[AttackKind::l2_inv], 200u);
    EXPECT_EQ(counts[AttackKind::l0_inv], 200u);
    EXPECT_EQ(counts.count(AttackKind::badnets_sq), 0u);
}

TEST(Loo, PlanValidation) {
    auto plan = LooPlan::make(AttackKind::l2_inv, 0);
    plan.training_attacks.push_back(AttackKind::l2_inv);
    EXPECT_THROW(plan.validate(), ConfigError);
    plan = LooPlan::make(AttackKind::l2_inv, 0);
    plan.training_attacks[0] = AttackKind::l2_inv;
    EXPECT_THROW(plan.validate(), ConfigError);
}

TEST(Loo, TestSet) {
    auto d = generate_synthetic_dataset(500, 10, ImageShape{3, 8, 8}, 2);
    auto plan = LooPlan::make(AttackKind::l0_inv, 0);
    auto t = build_loo_test_set(d, plan, TriggerSpec::defaults(AttackKind::l0_inv));
    EXPECT_EQ(t.size(), 1000u);
    EXPECT_EQ(count_provenance(t, Provenance::clean()), 500u);
    EXPECT_EQ(count_provenance(t, Provenance(AttackKind::l0_inv)), 500u);
    EXPECT_THROW(build_loo_test_set(d, plan, TriggerSpec::defaults(AttackKind::l2_inv)), ConfigError);
}

TEST(Batches, SizesAndDeterminism) {
    auto b = make_batches(300, 128, 5, 0);
    ASSERT_EQ(b.size(), 3u);
    EXPECT_EQ(b[0].size(), 128u);
    EXPECT_EQ(b[1].size(), 128u);
    EXPECT_EQ(b[2].size(), 44u);
    EXPECT_EQ(b, make_batches(300, 128, 5, 0));
    EXPECT_NE(b, make_batches(300, 128, 5, 1));
    EXPECT_THROW(make_batches(300, 0, 5, 0), ConfigError);
    std::vector<int> seen(300, 0);
    for (auto& batch : b)
        for (auto i : batch) ++seen[i];
    for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(DatasetCache, RoundTripAndCorruption) {
    auto dir = scratch_dir("bsdc");
    auto d = poison_dataset(generate_synthetic_dataset(30, 3, ImageShape{3, 8, 8}, 1),
                            TriggerSpec::defaults(AttackKind::badnets_px), 0.5, 1, 2);
    save_dataset(d, dir / "d.bsdc");
    EXPECT_EQ(load_dataset(dir / "d.bsdc"), d);

    auto bytes = container::read_file(dir / "d.bsdc");
    bytes[bytes.size() / 2] ^= 0x10;
    write_bytes(dir / "bad.bsdc", bytes);
    EXPECT_THROW(load_dataset(dir / "bad.bsdc"), DataError);
    bytes.resize(bytes.size() - 9);
    write_bytes(dir / "short.bsdc", bytes);
    EXPECT_THROW(load_dataset(dir / "short.bsdc"), DataError);
}

TEST(Resize, IdentityAndConstant) {
    Rng rng(1);
    ImageTensor img(ImageShape{3, 5, 7});
    for (auto& p : img.pixels()) p = static_cast<float>(rng.uniform());
    EXPECT_EQ(resize_bilinear(img, 5, 7), img);
    auto c = resize_bilinear(ImageTensor(ImageShape{3, 10, 10}, 0.25f), 4, 3);
    for (float v : c.pixels()) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Pool, LooCacheMatchesImageLevelSelection) {
    auto d = generate_synthetic_dataset(53, 5, ImageShape{3, 8, 8}, 1);
    EncoderConfig cfg;
    cfg.image.input = ImageShape{3, 8, 8};
    auto stack = build_toy_encoders(cfg, 3);
    const auto specs = default_specs();
    auto pool = embed_pool(stack.image, d, specs, 3);
    auto plan = LooPlan::make(AttackKind::trojan_sq, 8);

    auto from_pool = build_loo_training_cache(pool, plan);
    auto from_images = precompute_image_embeddings(stack.image, build_loo_training_set(d, plan, specs), 2);
    ASSERT_EQ(from_pool.size(), from_images.size());
    for (std::size_t i = 0; i < from_pool.size(); ++i) EXPECT_EQ(from_pool.records[i], from_images.records[i]);
    EXPECT_EQ(count_provenance(from_pool, Provenance(AttackKind::trojan_sq)), 0u);

    auto regrouped = make_pool(pool_to_cache(pool));
    EXPECT_EQ(regrouped.clean, pool.clean);
    EXPECT_EQ(regrouped.attacked, pool.attacked);
}

TEST(Pool, EmbeddingsAreUnitNormAndThreadIndependent) {
    auto d = generate_synthetic_dataset(20, 4, ImageShape{3, 8, 8}, 4);
    EncoderConfig cfg;
    cfg.image.input = ImageShape{3, 8, 8};
    auto stack = build_toy_encoders(cfg, 1);
    auto one = precompute_image_embeddings(stack.image, d, 1);
    auto four = precompute_image_embeddings(stack.image, d, 4);
    EXPECT_EQ(one.records, four.records);
    for (const auto& r : one.records) {
        double ss = 0;
        for (float v : r.vector) ss += static_cast<double>(v) * v;
        EXPECT_NEAR(ss, 1.0, 1e-5);
    }
}

TEST(Pool, MissingCounterpartRejected) {
    EmbeddingCache c;
    c.dim = 2;
    c.records.push_back({0, Provenance::clean(), DetectionLabel::clean, {1, 0}});
    c.records.push_back({1, Provenance::clean(), DetectionLabel::clean, {0, 1}});
    c.records.push_back({0, Provenance(AttackKind::l0_inv), DetectionLabel::backdoored, {1, 0}});
    EXPECT_THROW(make_pool(c), DataError);
}

TEST(SeparableCache, ThresholdOracleIsPerfect) {
    auto u = random_unit_vector(64, 1);
    auto c = separable_cache(u, 1000, 0.1, 2);
    std::size_t ok = 0;
    for (const auto& r : c.records) {
        double s = 0;
        for (std::size_t k = 0; k < 64; ++k) s += static_cast<double>(r.vector[k]) * u[k];
        ok += (s < 0) == (r.detection == DetectionLabel::backdoored);
    }
    EXPECT_EQ(ok, c.size());
}
