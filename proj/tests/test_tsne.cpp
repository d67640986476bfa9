#include <gtest/gtest.h>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bsentinel/tsne.hpp"

using namespace bsentinel;
namespace fs = std::filesystem;

namespace {

Tensor<double> clusters(std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> x = Tensor<double>::zeros({n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) x(i, k) = (k == i % 4 ? 5.0 : 0.0) + rng.normal();
    return x;
}

TsneConfig quick(std::size_t iterations = 300) {
    TsneConfig c;
    c.perplexity = 10;
    c.iterations = iterations;
    return c;
}

std::size_t nearest(const std::vector<std::array<double, 2>>& p, std::size_t i) {
    std::size_t best = i == 0 ? 1 : 0;
    for (std::size_t j = 0; j < p.size(); ++j) {
        if (j == i) continue;
        auto d = [&](std::size_t k) { return std::hypot(p[i][0] - p[k][0], p[i][1] - p[k][1]); };
        if (d(j) < d(best)) best = j;
    }
    return best;
}

}  // namespace

TEST(Affinities, NormalizedSymmetricZeroDiagonal) {
    auto x = clusters(60, 5, 1);
    auto a = pairwise_affinities(x, 15.0);
    double total = 0;
    for (std::size_t i = 0; i < a.n; ++i) {
        EXPECT_EQ(a(i, i), 0.0);
        for (std::size_t j = 0; j < a.n; ++j) {
            EXPECT_GE(a(i, j), 0.0);
            EXPECT_NEAR(a(i, j), a(j, i), 1e-12);
            total += a(i, j);
        }
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
}

TEST(Affinities, RowPerplexityMatchesTarget) {
    auto x = clusters(80, 6, 2);
    for (double perp : {5.0, 20.0}) {
        auto a = pairwise_affinities(x, perp);
        for (std::size_t i = 0; i < a.n; ++i) {
            // entropy recomputed from the returned conditional row
            EXPECT_NEAR(row_perplexity(&a.conditional[i * a.n], a.n), perp, 1e-3) << "row " << i;
        }
    }
}

TEST(Affinities, IdenticalPairsGiveSymmetricBlocks) {
    auto x = Tensor<double>::matrix(4, 2, {0, 0, 0, 0, 100, 100, 100, 100});
    auto a = pairwise_affinities(x, 1.5);
    EXPECT_EQ(a(0, 1), a(1, 0));
    EXPECT_EQ(a(2, 3), a(3, 2));
    EXPECT_NEAR(a(0, 1), a(2, 3), 1e-15);
    EXPECT_GT(a(0, 1), a(0, 2));
}

TEST(Affinities, InfeasiblePerplexity) {
    auto x = clusters(10, 3, 3);
    EXPECT_THROW(pairwise_affinities(x, 9.0), ConfigError);
    EXPECT_THROW(pairwise_affinities(x, 1.0), ConfigError);
    EXPECT_THROW(pairwise_affinities(clusters(3, 3, 3), 1.5), DataError);
}

TEST(Project, RectangleCornersKeepNeighbours) {
    auto x = Tensor<double>::matrix(4, 2, {0, 0, 1, 0, 0, 3, 1, 3});
    // four points need a cooler learning rate than the default
    TsneConfig cfg;
    cfg.perplexity = 2.0;
    cfg.learning_rate = 50.0;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        cfg.seed = seed;
        auto out = project(x, cfg);
        std::vector<std::array<double, 2>> pts;
        for (std::size_t i = 0; i < 4; ++i) pts.push_back({out.x(i), out.y(i)});
        EXPECT_EQ(nearest(pts, 0), 1u) << "seed " << seed;
        EXPECT_EQ(nearest(pts, 1), 0u) << "seed " << seed;
        EXPECT_EQ(nearest(pts, 2), 3u) << "seed " << seed;
        EXPECT_EQ(nearest(pts, 3), 2u) << "seed " << seed;
    }
}

TEST(Project, KlDescendsAfterExaggeration) {
    auto x = clusters(200, 10, 4);
    auto out = project(x, TsneConfig{});
    ASSERT_EQ(out.kl_history.size(), 20u);
    double at_end_of_exaggeration = 0;
    for (const auto& c : out.kl_history) {
        EXPECT_GE(c.kl, 0.0);
        if (c.iteration == 250) at_end_of_exaggeration = c.kl;
    }
    for (std::size_t i = 1; i < out.kl_history.size(); ++i) {
        if (out.kl_history[i - 1].iteration < 250) continue;
        EXPECT_LE(out.kl_history[i].kl, out.kl_history[i - 1].kl + 1e-3) << "iteration " << out.kl_history[i].iteration;
    }
    EXPECT_LE(out.final_kl, at_end_of_exaggeration);
}

TEST(Project, DeterministicAndThreadIndependent) {
    auto x = clusters(50, 4, 5);
    auto cfg = quick();
    auto a = project(x, cfg);
    auto b = project(x, cfg);
    EXPECT_EQ(a.xy, b.xy);
    cfg.threads = 4;
    auto c = project(x, cfg);
    for (std::size_t i = 0; i < a.xy.size(); ++i) EXPECT_NEAR(a.xy[i], c.xy[i], 1e-6);
    for (double v : a.xy) EXPECT_TRUE(std::isfinite(v));
    EXPECT_EQ(a.size(), 50u);
}

TEST(Project, SubsamplesAboveCap) {
    auto x = clusters(40, 3, 6);
    auto cfg = quick(60);
    cfg.max_points = 25;
    auto out = project(x, cfg);
    EXPECT_EQ(out.size(), 25u);
    EXPECT_TRUE(std::is_sorted(out.source.begin(), out.source.end()));
}

TEST(Scatter, CsvAndSvg) {
    EmbeddingCache c;
    c.dim = 4;
    Rng rng(7);
    for (std::uint64_t i = 0; i < 30; ++i) {
        std::vector<float> v(4);
        for (auto& e : v) e = static_cast<float>(rng.normal());
        const bool bd = i >= 15;
        c.records.push_back({i, bd ? Provenance(AttackKind::trojan_wm) : Provenance::clean(),
                             bd ? DetectionLabel::backdoored : DetectionLabel::clean, v});
    }
    auto text = Tensor<float>::matrix(2, 4, {1, 0, 0, 0, 0, 1, 0, 0});
    auto cfg = quick(100);
    cfg.perplexity = 5;
    auto pts = project_embeddings(c, &text, cfg);
    ASSERT_EQ(pts.size(), 32u);

    auto dir = fs::temp_directory_path() / "bsentinel_scatter";
    fs::create_directories(dir);
    export_scatter(pts, dir / "p.csv", ScatterFormat::csv);
    std::ifstream csv(dir / "p.csv");
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "x,y,role,provenance");
    std::size_t rows = 0, t1 = 0, t2 = 0;
    while (std::getline(csv, line)) {
        ++rows;
        t1 += line.find(",text-T1,") != std::string::npos;
        t2 += line.find(",text-T2,") != std::string::npos;
    }
    EXPECT_EQ(rows, 32u);
    EXPECT_EQ(t1, 1u);
    EXPECT_EQ(t2, 1u);

    export_scatter(pts, dir / "p.svg", ScatterFormat::svg);
    boost::property_tree::ptree tree;
    EXPECT_NO_THROW(boost::property_tree::read_xml((dir / "p.svg").string(), tree));
    EXPECT_EQ(tree.get_child("svg").get_child("<xmlattr>").get<std::string>("xmlns"), "http://www.w3.org/2000/svg");
}
