#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "attack_kind.hpp"
#include "batching.hpp"
#include "container.hpp"
#include "errors.hpp"
#include "image.hpp"
#include "image_io.hpp"
#include "rng.hpp"
#include "trigger.hpp"

namespace bsentinel {

struct Sample {
    std::uint64_t id = 0;  // index of the clean source image
    ImageTensor image;
    std::uint32_t class_label = 0;
    DetectionLabel detection = DetectionLabel::clean;
    Provenance provenance{};

    friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
    ImageShape shape{};
    std::uint32_t num_classes = 10;
    std::vector<Sample> samples;

    std::size_t size() const noexcept { return samples.size(); }
    bool empty() const noexcept { return samples.empty(); }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline std::size_t count_provenance(const Dataset& d, Provenance p) {
    return static_cast<std::size_t>(
        std::count_if(d.samples.begin(), d.samples.end(), [p](const Sample& s) { return s.provenance == p; }));
}

/// Throws if any sample's detection label disagrees with its provenance.
inline void check_detection_labels(const Dataset& d) {
    for (const auto& s : d.samples) {
        if (s.detection != detection_label_for(s.provenance)) {
            throw DataError("sample " + std::to_string(s.id) + " has detection label inconsistent with provenance " +
                            s.provenance.name());
        }
    }
}

// ---------------------------------------------------------------------------
// Poisoning

/// D_p = D_m u D_b: round(rate * |D|) seeded samples get the trigger and the
/// target label; the rest stay benign. Positions are preserved.
inline Dataset poison_dataset(const Dataset& clean, const TriggerSpec& spec, double rate, std::uint32_t target,
                              std::uint64_t seed) {
    if (clean.empty()) throw DataError("poison_dataset: empty dataset");
    if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("poisoning rate must be in (0, 1]");
    const TriggerRealization trig = realize_trigger(spec, clean.shape);
    const auto count = static_cast<std::size_t>(std::llround(rate * static_cast<double>(clean.size())));
    Rng rng(derive_seed(seed, 0xB0150ULL));
    Dataset out = clean;
    for (std::size_t idx : rng.sample_without_replacement(clean.size(), count)) {
        Sample& s = out.samples[idx];
        s.image = apply_trigger(s.image, trig);
        s.class_label = poison_label(s.class_label, target, clean.num_classes);
        s.provenance = spec.kind;
        s.detection = DetectionLabel::backdoored;
    }
    return out;
}

/// Every image of `clean` with the trigger applied (labels unchanged).
inline Dataset backdoor_all(const Dataset& clean, const TriggerSpec& spec) {
    const TriggerRealization trig = realize_trigger(spec, clean.shape);
    Dataset out = clean;
    for (Sample& s : out.samples) {
        s.image = apply_trigger(s.image, trig);
        s.provenance = spec.kind;
        s.detection = DetectionLabel::backdoored;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ingestion

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// CIFAR-10 binary batches: records of 1 label byte followed by 1024 R, 1024 G
/// and 1024 B bytes (row-major 32x32).
inline Dataset load_cifar10_binary(const std::vector<std::filesystem::path>& files) {
    Dataset out;
    out.shape = ImageShape{3, 32, 32};
    out.num_classes = 10;
    for (const auto& path : files) {
        const auto bytes = container::read_file(path);
        if (bytes.size() % kCifarRecordBytes != 0) {
            throw DataError("'" + path.string() + "' is truncated: " + std::to_string(bytes.size()) +
                            " bytes is not a multiple of " + std::to_string(kCifarRecordBytes));
        }
        for (std::size_t off = 0; off < bytes.size(); off += kCifarRecordBytes) {
            const std::uint8_t label = bytes[off];
            if (label >= 10) {
                throw DataError("'" + path.string() + "' record " + std::to_string(off / kCifarRecordBytes) +
                                ": label " + std::to_string(label) + " out of range");
            }
            Sample s;
            s.id = out.samples.size();
            s.class_label = label;
            std::vector<float> px(3072);
            for (std::size_t i = 0; i < 3072; ++i) px[i] = static_cast<float>(bytes[off + 1 + i]) / 255.0f;
            s.image = ImageTensor(out.shape, std::move(px));
            out.samples.push_back(std::move(s));
        }
    }
    return out;
}

inline Dataset load_cifar10_binary(const std::filesystem::path& file) {
    return load_cifar10_binary(std::vector<std::filesystem::path>{file});
}

/// Images listed in a `filename,label` CSV (paths relative to `dir`), decoded
/// and bilinearly resized to `shape`. Samples keep CSV order.
inline Dataset load_image_directory(const std::filesystem::path& dir, const std::filesystem::path& labels_csv,
                                    ImageShape shape, std::uint32_t num_classes) {
    if (shape.channels != 3) throw ConfigError("directory ingestion produces 3-channel images");
    std::ifstream in(labels_csv);
    if (!in) throw IoError("cannot open labels CSV '" + labels_csv.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw DataError("labels CSV '" + labels_csv.string() + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "filename,label") throw DataError("labels CSV header must be 'filename,label', got '" + line + "'");

    Dataset out;
    out.shape = shape;
    out.num_classes = num_classes;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.rfind(',');
        if (comma == std::string::npos) throw DataError("labels CSV row " + std::to_string(row) + ": expected 'filename,label'");
        const std::string name = line.substr(0, comma);
        std::uint32_t label = 0;
        try {
            std::size_t used = 0;
            const unsigned long v = std::stoul(line.substr(comma + 1), &used);
            if (used != line.size() - comma - 1) throw std::invalid_argument("trailing");
            label = static_cast<std::uint32_t>(v);
        } catch (const std::exception&) {
            throw DataError("labels CSV row " + std::to_string(row) + ": bad label '" + line.substr(comma + 1) + "'");
        }
        if (label >= num_classes) {
            throw DataError("labels CSV row " + std::to_string(row) + ": label " + std::to_string(label) +
                            " out of range for " + std::to_string(num_classes) + " classes");
        }
        const auto path = dir / name;
        if (!std::filesystem::exists(path)) {
            throw IoError("labels CSV row " + std::to_string(row) + ": missing file '" + path.string() + "'");
        }
        Sample s;
        s.id = out.samples.size();
        s.class_label = label;
        s.image = resize_bilinear(read_image(path), shape.height, shape.width);
        out.samples.push_back(std::move(s));
    }
    return out;
}

/// Seeded class-conditional images: each class has its own smooth colour
/// pattern, and every sample adds pixel noise. Classes are balanced
/// (sample i has class i mod K).
inline Dataset generate_synthetic_dataset(std::size_t n, std::uint32_t num_classes, ImageShape shape,
                                          std::uint64_t seed) {
    if (num_classes == 0 || n < num_classes) {
        throw ConfigError("synthetic dataset needs n >= K (n=" + std::to_string(n) + ", K=" + std::to_string(num_classes) + ")");
    }
    struct Base {
        std::vector<double> color, fy, fx, phase;
    };
    Rng base_rng(derive_seed(seed, 0xC1A55ULL));
    std::vector<Base> bases(num_classes);
    for (auto& b : bases) {
        for (std::size_t c = 0; c < shape.channels; ++c) {
            b.color.push_back(base_rng.uniform(0.25, 0.75));
            b.fy.push_back(base_rng.uniform(0.5, 3.0));
            b.fx.push_back(base_rng.uniform(0.5, 3.0));
            b.phase.push_back(base_rng.uniform(0.0, 2.0 * std::numbers::pi));
        }
    }
    Rng noise(derive_seed(seed, 0x4015EULL));
    Dataset out;
    out.shape = shape;
    out.num_classes = num_classes;
    out.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto cls = static_cast<std::uint32_t>(i % num_classes);
        const Base& b = bases[cls];
        ImageTensor img(shape);
        for (std::size_t c = 0; c < shape.channels; ++c)
            for (std::size_t y = 0; y < shape.height; ++y)
                for (std::size_t x = 0; x < shape.width; ++x) {
                    const double v = b.color[c] + 0.2 * std::sin(2.0 * std::numbers::pi *
                                                                     (b.fy[c] * static_cast<double>(y) / static_cast<double>(shape.height) +
                                                                      b.fx[c] * static_cast<double>(x) / static_cast<double>(shape.width)) +
                                                                 b.phase[c]);
                    img.at(c, y, x) = static_cast<float>(v + 0.05 * noise.normal());
                }
        img.clamp();
        out.samples.push_back(Sample{i, std::move(img), cls, DetectionLabel::clean, Provenance::clean()});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Leave-one-attack-out construction

struct LooPlan {
    AttackKind held_out = AttackKind::badnets_sq;
    std::vector<AttackKind> training_attacks;  // canonical order
    std::uint64_t seed = 0;

    static LooPlan make(AttackKind held_out, std::uint64_t seed) {
        LooPlan p;
        p.held_out = held_out;
        p.seed = seed;
        for (AttackKind k : kAllAttacks)
            if (k != held_out) p.training_attacks.push_back(k);
        return p;
    }

    void validate() const {
        if (training_attacks.size() != 5) throw ConfigError("leave-one-out plan needs exactly 5 training attacks");
        for (std::size_t i = 0; i < training_attacks.size(); ++i) {
            if (training_attacks[i] == held_out) throw ConfigError("held-out attack appears among training attacks");
            for (std::size_t j = 0; j < i; ++j)
                if (training_attacks[j] == training_attacks[i]) throw ConfigError("duplicate training attack");
        }
    }
};

/// Source indices (into the N clean training samples) that each training
/// attack contributes. Counts are floor(N/5), with the remainder going to the
/// first N mod 5 attacks in canonical order.
inline std::vector<std::pair<AttackKind, std::vector<std::size_t>>> loo_selection(std::size_t n, const LooPlan& plan) {
    plan.validate();
    std::vector<AttackKind> ordered = plan.training_attacks;
    std::sort(ordered.begin(), ordered.end());
    const std::size_t m = ordered.size();
    std::vector<std::pair<AttackKind, std::vector<std::size_t>>> out;
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t count = n / m + (i < n % m ? 1 : 0);
        Rng rng(derive_seed(plan.seed, 0x100ULL + static_cast<std::uint64_t>(ordered[i])));
        out.emplace_back(ordered[i], rng.sample_without_replacement(n, count));
    }
    return out;
}

using SpecMap = std::map<AttackKind, TriggerSpec>;

inline SpecMap default_specs(std::uint64_t seed = 0) {
    SpecMap specs;
    for (AttackKind k : kAllAttacks) specs[k] = TriggerSpec::defaults(k, seed);
    return specs;
}

inline const TriggerSpec& spec_for(const SpecMap& specs, AttackKind kind) {
    auto it = specs.find(kind);
    if (it == specs.end()) throw ConfigError(std::string("no trigger spec for attack ") + std::string(attack_name(kind)));
    if (it->second.kind != kind) throw ConfigError("trigger spec registered under the wrong attack kind");
    return it->second;
}

/// All N clean samples plus N backdoored ones spread over the five training
/// attacks. The held-out attack contributes nothing.
inline Dataset build_loo_training_set(const Dataset& clean_train, const LooPlan& plan, const SpecMap& specs) {
    Dataset out;
    out.shape = clean_train.shape;
    out.num_classes = clean_train.num_classes;
    out.samples = clean_train.samples;
    for (auto& s : out.samples) {
        if (!s.provenance.is_clean()) throw DataError("leave-one-out source set must be clean");
    }
    for (const auto& [kind, indices] : loo_selection(clean_train.size(), plan)) {
        const TriggerRealization trig = realize_trigger(spec_for(specs, kind), clean_train.shape);
        for (std::size_t idx : indices) {
            Sample s = clean_train.samples[idx];
            s.image = apply_trigger(s.image, trig);
            s.provenance = kind;
            s.detection = DetectionLabel::backdoored;
            out.samples.push_back(std::move(s));
        }
    }
    return out;
}

/// All M clean test samples followed by their held-out-attack versions.
inline Dataset build_loo_test_set(const Dataset& clean_test, const LooPlan& plan, const TriggerSpec& spec) {
    if (spec.kind != plan.held_out) {
        throw ConfigError(std::string("test spec kind ") + std::string(attack_name(spec.kind)) +
                          " does not match held-out attack " + std::string(attack_name(plan.held_out)));
    }
    Dataset out = clean_test;
    const Dataset attacked = backdoor_all(clean_test, spec);
    out.samples.insert(out.samples.end(), attacked.samples.begin(), attacked.samples.end());
    return out;
}

/// Sample-index batches of one epoch (see make_batches).
inline std::vector<std::vector<std::size_t>> batch_iterator(const Dataset& d, std::size_t batch_size,
                                                            std::uint64_t shuffle_seed, std::size_t epoch) {
    return make_batches(d.size(), batch_size, shuffle_seed, epoch);
}

// ---------------------------------------------------------------------------
// Dataset cache: magic "BSDC", version u32, section count u32; one pixel
// section (tag 2): C, H, W, K as u32, count u64, then records of
// [id u64, provenance u8, detection u8, class u32, C*H*W f32]; trailing CRC32.

namespace bsdc {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint8_t kPixelSection = 2;

inline std::vector<std::uint8_t> encode(const Dataset& d) {
    container::Writer w;
    w.magic("BSDC");
    w.u32(kVersion);
    w.u32(1);
    w.u8(kPixelSection);
    w.u32(static_cast<std::uint32_t>(d.shape.channels));
    w.u32(static_cast<std::uint32_t>(d.shape.height));
    w.u32(static_cast<std::uint32_t>(d.shape.width));
    w.u32(d.num_classes);
    w.u64(d.size());
    for (const auto& s : d.samples) {
        if (!(s.image.shape() == d.shape)) throw ShapeError("sample shape differs from dataset shape");
        w.u64(s.id);
        w.u8(s.provenance.code());
        w.u8(static_cast<std::uint8_t>(s.detection));
        w.u32(s.class_label);
        w.f32s(s.image.pixels());
    }
    w.seal();
    return w.buffer();
}

inline Dataset decode(std::span<const std::uint8_t> bytes, const std::string& what) {
    container::Reader head(bytes, what);
    head.expect_magic("BSDC");
    const std::uint32_t version = head.u32();
    if (version != kVersion) throw DataError(what + ": unsupported format version " + std::to_string(version));
    auto body = container::verify_crc(bytes, what);
    container::Reader r(body, what);
    r.expect_magic("BSDC");
    r.u32();
    if (r.u32() != 1) throw DataError(what + ": expected exactly one section");
    if (r.u8() != kPixelSection) throw DataError(what + ": expected a pixel section");
    Dataset d;
    d.shape.channels = r.u32();
    d.shape.height = r.u32();
    d.shape.width = r.u32();
    d.num_classes = r.u32();
    if (d.shape.size() == 0) throw DataError(what + ": zero image dimension");
    const std::uint64_t count = r.u64();
    const std::size_t record_bytes = 14 + d.shape.size() * 4;
    if (count > r.remaining() / record_bytes) throw DataError(what + ": truncated section");
    d.samples.resize(count);
    for (auto& s : d.samples) {
        s.id = r.u64();
        s.provenance = Provenance::from_code(r.u8());
        const std::uint8_t det = r.u8();
        if (det > 1) throw DataError(what + ": invalid detection label");
        s.detection = static_cast<DetectionLabel>(det);
        s.class_label = r.u32();
        std::vector<float> px(d.shape.size());
        r.f32s(px);
        s.image = ImageTensor(d.shape, std::move(px));
    }
    if (r.remaining() != 0) throw DataError(what + ": trailing bytes after last section");
    return d;
}

}  // namespace bsdc

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
    container::Writer w;
    const auto bytes = bsdc::encode(d);
    w.bytes(bytes.data(), bytes.size());
    w.save(path);
}

inline Dataset load_dataset(const std::filesystem::path& path) {
    const auto bytes = container::read_file(path);
    return bsdc::decode(bytes, path.string());
}

}  // namespace bsentinel
