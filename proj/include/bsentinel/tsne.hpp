#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "attack_kind.hpp"
#include "embedding_cache.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "text_io.hpp"

namespace bsentinel {

struct TsneConfig {
    double perplexity = 30.0;
    std::size_t iterations = 1000;
    double learning_rate = 200.0;
    double momentum = 0.5;
    double final_momentum = 0.8;
    std::size_t momentum_switch = 250;
    double exaggeration = 12.0;
    std::size_t exaggeration_iters = 250;
    double init_std = 1e-4;
    std::uint64_t seed = 0;
    std::size_t max_points = 5000;
    std::size_t log_every = 50;
    std::size_t threads = 1;

    void validate() const {
        if (!(perplexity > 1.0) || !std::isfinite(perplexity)) throw ConfigError("t-SNE perplexity must be > 1");
        if (iterations < 1) throw ConfigError("t-SNE needs at least one iteration");
        if (!(learning_rate > 0.0)) throw ConfigError("t-SNE learning rate must be positive");
        if (!(exaggeration >= 1.0)) throw ConfigError("t-SNE exaggeration must be >= 1");
        if (!(init_std > 0.0)) throw ConfigError("t-SNE init std must be positive");
        if (max_points < 4) throw ConfigError("t-SNE max_points must be >= 4");
        if (log_every < 1) throw ConfigError("t-SNE log interval must be >= 1");
    }
};

namespace detail {

/// Runs fn(begin, end) over [0, n) split into contiguous chunks.
inline void parallel_rows(std::size_t n, std::size_t threads, const std::function<void(std::size_t, std::size_t)>& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        fn(0, n);
        return;
    }
    const std::size_t chunk = (n + threads - 1) / threads;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        const std::size_t b = std::min(n, t * chunk), e = std::min(n, (t + 1) * chunk);
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    for (auto& th : pool) th.join();
}

inline std::vector<double> squared_distances(const Tensor<double>& x, std::size_t threads) {
    const std::size_t n = x.rows(), d = x.cols();
    std::vector<double> dist(n * n, 0.0);
    parallel_rows(n, threads, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < d; ++k) {
                    const double diff = x(i, k) - x(j, k);
                    s += diff * diff;
                }
                dist[i * n + j] = s;
            }
    });
    return dist;
}

}  // namespace detail

struct Affinities {
    std::size_t n = 0;
    /// Row-stochastic P_{j|i}, row-major n×n.
    std::vector<double> conditional;
    /// Symmetric joint P, row-major n×n, sums to 1.
    std::vector<double> joint;
    /// Precision 1/(2σ_i²) per row.
    std::vector<double> beta;

    double operator()(std::size_t i, std::size_t j) const { return joint[i * n + j]; }
};

/// Perplexity exp(H) of one conditional row, H in nats.
inline double row_perplexity(const double* row, std::size_t n) {
    double h = 0.0;
    for (std::size_t j = 0; j < n; ++j)
        if (row[j] > 0.0) h -= row[j] * std::log(row[j]);
    return std::exp(h);
}

inline void check_perplexity(std::size_t n, double perplexity) {
    if (n < 4) throw DataError("t-SNE needs at least 4 points, got " + std::to_string(n));
    if (!(perplexity > 1.0) || !(perplexity < static_cast<double>(n - 1))) {
        throw ConfigError("perplexity " + std::to_string(perplexity) + " is infeasible for " + std::to_string(n) +
                          " points (need 1 < perplexity < " + std::to_string(n - 1) + ")");
    }
}

/// Gaussian affinities with a per-point bandwidth found by bisection so that
/// each conditional row reaches the target perplexity.
inline Affinities pairwise_affinities(const Tensor<double>& x, double perplexity, std::size_t threads = 1) {
    if (x.rank() != 2) throw ShapeError("pairwise_affinities expects an n×d matrix, got " + shape_string(x.shape()));
    const std::size_t n = x.rows();
    check_perplexity(n, perplexity);
    constexpr double tol = 1e-4;
    constexpr int max_iter = 64;
    const std::vector<double> dist = detail::squared_distances(x, threads);

    Affinities a;
    a.n = n;
    a.conditional.assign(n * n, 0.0);
    a.beta.assign(n, 1.0);
    const double log_target = std::log(perplexity);

    detail::parallel_rows(n, threads, [&](std::size_t b, std::size_t e) {
        std::vector<double> p(n);
        for (std::size_t i = b; i < e; ++i) {
            const double* d = &dist[i * n];
            double dmin = std::numeric_limits<double>::infinity(), dsum = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                dmin = std::min(dmin, d[j]);
                dsum += d[j];
            }
            const double spread = dsum / static_cast<double>(n - 1) - dmin;
            double beta = spread > 0.0 ? 1.0 / spread : 1.0;
            double lo = 0.0, hi = std::numeric_limits<double>::infinity();
            // Entropy and normalized row at a given beta; distances are
            // shifted by the row minimum so the largest term is exp(0).
            auto evaluate = [&](double bt) {
                double sum = 0.0, weighted = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    p[j] = j == i ? 0.0 : std::exp(-bt * (d[j] - dmin));
                    sum += p[j];
                    weighted += p[j] * (d[j] - dmin);
                }
                for (std::size_t j = 0; j < n; ++j) p[j] /= sum;
                return std::log(sum) + bt * weighted / sum;
            };
            double h = evaluate(beta);
            for (int it = 0; it < max_iter && std::abs(std::exp(h) - perplexity) > tol; ++it) {
                if (h > log_target) {
                    lo = beta;
                    beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
                } else {
                    hi = beta;
                    beta = 0.5 * (beta + lo);
                }
                h = evaluate(beta);
            }
            a.beta[i] = beta;
            std::copy(p.begin(), p.end(), a.conditional.begin() + static_cast<std::ptrdiff_t>(i * n));
        }
    });

    a.joint.assign(n * n, 0.0);
    const double denom = 2.0 * static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = (a.conditional[i * n + j] + a.conditional[j * n + i]) / denom;
            a.joint[i * n + j] = v;
            a.joint[j * n + i] = v;
        }
    return a;
}

enum class PointRole { image, text_t1, text_t2 };

inline std::string role_name(PointRole r) {
    switch (r) {
        case PointRole::image: return "image";
        case PointRole::text_t1: return "text-T1";
        case PointRole::text_t2: return "text-T2";
    }
    return "?";
}

struct KlCheckpoint {
    std::size_t iteration = 0;
    double kl = 0.0;
    bool exaggerated = false;
};

struct ProjectedPoints {
    std::vector<double> xy;  // n×2 row-major
    std::vector<PointRole> roles;
    std::vector<std::optional<Provenance>> provenance;
    /// Row of the input matrix each point came from (differs from the
    /// position only after subsampling).
    std::vector<std::size_t> source;
    std::vector<KlCheckpoint> kl_history;
    double final_kl = 0.0;

    std::size_t size() const { return roles.size(); }
    double x(std::size_t i) const { return xy[2 * i]; }
    double y(std::size_t i) const { return xy[2 * i + 1]; }
};

namespace detail {

/// KL(P‖Q) given Student-t numerators and their total z.
inline double tsne_kl(const std::vector<double>& p, const std::vector<double>& num, double z, std::size_t n) {
    double kl = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double pij = p[i * n + j];
            if (pij <= 0.0) continue;
            const double qij = std::max(num[i * n + j] / z, 1e-300);
            kl += pij * std::log(pij / qij);
        }
    return kl;
}

inline double student_numerators(const std::vector<double>& y, std::size_t n, std::vector<double>& num, std::size_t threads) {
    std::vector<double> row_sum(n, 0.0);
    parallel_rows(n, threads, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) {
                    num[i * n + j] = 0.0;
                    continue;
                }
                const double dx = y[2 * i] - y[2 * j], dy = y[2 * i + 1] - y[2 * j + 1];
                num[i * n + j] = 1.0 / (1.0 + dx * dx + dy * dy);
                s += num[i * n + j];
            }
            row_sum[i] = s;
        }
    });
    double z = 0.0;
    for (double s : row_sum) z += s;
    return z;
}

}  // namespace detail

using KlLogger = std::function<void(const KlCheckpoint&)>;

/// Exact t-SNE to two dimensions. Inputs above config.max_points are
/// subsampled with the config seed.
inline ProjectedPoints project(const Tensor<double>& x, const TsneConfig& config, const KlLogger& log = {}) {
    config.validate();
    if (x.rank() != 2) throw ShapeError("t-SNE expects an n×d matrix, got " + shape_string(x.shape()));
    if (!x.all_finite()) throw NumericError("t-SNE input contains non-finite values");

    std::vector<std::size_t> keep(x.rows());
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = i;
    Tensor<double> data = x;
    if (x.rows() > config.max_points) {
        Rng rng(derive_seed(config.seed, 0x7a5e));
        keep = rng.sample_without_replacement(x.rows(), config.max_points);
        std::sort(keep.begin(), keep.end());
        std::vector<double> sub;
        sub.reserve(keep.size() * x.cols());
        for (std::size_t r : keep) {
            auto row = x.row(r);
            sub.insert(sub.end(), row.begin(), row.end());
        }
        data = Tensor<double>({keep.size(), x.cols()}, std::move(sub));
    }

    const std::size_t n = data.rows();
    const Affinities aff = pairwise_affinities(data, config.perplexity, config.threads);
    std::vector<double> p = aff.joint;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) p[i * n + j] = std::max(p[i * n + j], 1e-12);

    Rng rng(derive_seed(config.seed, 0x1417));
    std::vector<double> y(2 * n), update(2 * n, 0.0), gains(2 * n, 1.0), grad(2 * n, 0.0), num(n * n, 0.0);
    for (double& v : y) v = config.init_std * rng.normal();

    ProjectedPoints out;
    auto checkpoint = [&](std::size_t iter, bool exaggerated) {
        const double z = detail::student_numerators(y, n, num, config.threads);
        KlCheckpoint c{iter, detail::tsne_kl(p, num, z, n), exaggerated};
        out.kl_history.push_back(c);
        if (log) log(c);
    };

    for (std::size_t iter = 1; iter <= config.iterations; ++iter) {
        const bool exaggerated = iter <= config.exaggeration_iters;
        const double factor = exaggerated ? config.exaggeration : 1.0;
        const double momentum = iter <= config.momentum_switch ? config.momentum : config.final_momentum;
        const double z = detail::student_numerators(y, n, num, config.threads);
        detail::parallel_rows(n, config.threads, [&](std::size_t b, std::size_t e) {
            for (std::size_t i = b; i < e; ++i) {
                double gx = 0.0, gy = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    if (i == j) continue;
                    const double w = (factor * p[i * n + j] - num[i * n + j] / z) * num[i * n + j];
                    gx += w * (y[2 * i] - y[2 * j]);
                    gy += w * (y[2 * i + 1] - y[2 * j + 1]);
                }
                grad[2 * i] = 4.0 * gx;
                grad[2 * i + 1] = 4.0 * gy;
            }
        });
        for (std::size_t k = 0; k < 2 * n; ++k) {
            gains[k] = (grad[k] > 0.0) != (update[k] > 0.0) ? gains[k] + 0.2 : gains[k] * 0.8;
            gains[k] = std::max(gains[k], 0.01);
            update[k] = momentum * update[k] - config.learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
        double mx = 0.0, my = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            mx += y[2 * i];
            my += y[2 * i + 1];
        }
        mx /= static_cast<double>(n);
        my /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[2 * i] -= mx;
            y[2 * i + 1] -= my;
        }
        if (iter % config.log_every == 0 || iter == config.iterations) checkpoint(iter, exaggerated);
    }

    for (double v : y)
        if (!std::isfinite(v)) throw NumericError("t-SNE diverged to non-finite coordinates");
    out.xy = std::move(y);
    out.roles.assign(n, PointRole::image);
    out.provenance.assign(n, std::nullopt);
    out.source = std::move(keep);
    out.final_kl = out.kl_history.back().kl;
    return out;
}

/// Joint projection of image embeddings and, optionally, the two class text
/// embeddings (rows 0 and 1 of `text`). Text points are never subsampled.
inline ProjectedPoints project_embeddings(const EmbeddingCache& images, const Tensor<float>* text, const TsneConfig& config,
                                          const KlLogger& log = {}) {
    config.validate();
    if (text && (text->rank() != 2 || text->rows() != 2 || text->cols() != images.dim)) {
        throw ShapeError("text embeddings must be 2×" + std::to_string(images.dim));
    }
    const std::size_t n_text = text ? 2 : 0;
    std::vector<std::size_t> chosen(images.size());
    for (std::size_t i = 0; i < chosen.size(); ++i) chosen[i] = i;
    const std::size_t image_cap = config.max_points - n_text;
    if (chosen.size() > image_cap) {
        Rng rng(derive_seed(config.seed, 0x7a5e));
        chosen = rng.sample_without_replacement(images.size(), image_cap);
        std::sort(chosen.begin(), chosen.end());
    }
    const std::size_t n = chosen.size() + n_text;
    std::vector<double> xs;
    xs.reserve(n * images.dim);
    for (std::size_t i : chosen) xs.insert(xs.end(), images.records[i].vector.begin(), images.records[i].vector.end());
    for (std::size_t t = 0; t < n_text; ++t) {
        auto row = text->row(t);
        xs.insert(xs.end(), row.begin(), row.end());
    }
    ProjectedPoints out = project(Tensor<double>({n, images.dim}, std::move(xs)), config, log);
    for (std::size_t i = 0; i < chosen.size(); ++i) {
        out.provenance[i] = images.records[chosen[i]].provenance;
        out.source[i] = chosen[i];
    }
    for (std::size_t t = 0; t < n_text; ++t) {
        out.roles[chosen.size() + t] = t == 0 ? PointRole::text_t1 : PointRole::text_t2;
        out.source[chosen.size() + t] = t;
    }
    return out;
}

enum class ScatterFormat { csv, svg };

namespace detail {

inline std::string provenance_label(const std::optional<Provenance>& p) { return p ? p->name() : "none"; }

inline const char* provenance_color(const std::optional<Provenance>& p) {
    static constexpr const char* palette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3"};
    return p ? palette[p->code()] : "#000000";
}

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

inline std::string scatter_svg(const ProjectedPoints& pts) {
    constexpr double size = 800.0, pad = 40.0;
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (pts.size() > 0) {
        xmin = xmax = pts.x(0);
        ymin = ymax = pts.y(0);
        for (std::size_t i = 1; i < pts.size(); ++i) {
            xmin = std::min(xmin, pts.x(i));
            xmax = std::max(xmax, pts.x(i));
            ymin = std::min(ymin, pts.y(i));
            ymax = std::max(ymax, pts.y(i));
        }
    }
    const double span = std::max({xmax - xmin, ymax - ymin, 1e-12});
    auto sx = [&](double v) { return pad + (v - xmin) / span * (size - 2 * pad); };
    auto sy = [&](double v) { return size - pad - (v - ymin) / span * (size - 2 * pad); };

    std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(size + 160) + "\" height=\"" + fmt(size) +
         "\" viewBox=\"0 0 " + fmt(size + 160) + " " + fmt(size) + "\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n<g id=\"images\">\n";
    std::vector<bool> used(7, false);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        if (pts.roles[i] != PointRole::image) continue;
        if (pts.provenance[i]) used[pts.provenance[i]->code()] = true;
        s += "<circle cx=\"" + fmt(sx(pts.x(i))) + "\" cy=\"" + fmt(sy(pts.y(i))) + "\" r=\"2.5\" fill=\"" +
             provenance_color(pts.provenance[i]) + "\" fill-opacity=\"0.7\"/>\n";
    }
    s += "</g>\n<g id=\"text\">\n";
    for (std::size_t i = 0; i < pts.size(); ++i) {
        if (pts.roles[i] == PointRole::image) continue;
        const double cx = sx(pts.x(i)), cy = sy(pts.y(i));
        const bool t1 = pts.roles[i] == PointRole::text_t1;
        s += "<rect x=\"" + fmt(cx - 7) + "\" y=\"" + fmt(cy - 7) + "\" width=\"14\" height=\"14\" fill=\"" +
             (t1 ? "#ffd700" : "#000000") + "\" stroke=\"#000000\" stroke-width=\"2\"/>\n";
        s += "<text x=\"" + fmt(cx + 10) + "\" y=\"" + fmt(cy - 10) + "\" font-family=\"sans-serif\" font-size=\"14\">" +
             (t1 ? "T1 (clean)" : "T2 (backdoored)") + "</text>\n";
    }
    s += "</g>\n<g id=\"legend\" font-family=\"sans-serif\" font-size=\"12\">\n";
    double ly = pad;
    for (std::uint8_t code = 0; code < 7; ++code) {
        if (!used[code]) continue;
        const Provenance p = Provenance::from_code(code);
        s += "<circle cx=\"" + fmt(size + 10) + "\" cy=\"" + fmt(ly) + "\" r=\"5\" fill=\"" + provenance_color(p) + "\"/>\n";
        s += "<text x=\"" + fmt(size + 20) + "\" y=\"" + fmt(ly + 4) + "\">" + p.name() + "</text>\n";
        ly += 20;
    }
    s += "</g>\n</svg>\n";
    return s;
}

}  // namespace detail

inline std::string scatter_csv(const ProjectedPoints& pts) {
    std::string s = "x,y,role,provenance\n";
    for (std::size_t i = 0; i < pts.size(); ++i) {
        s += detail::csv_number(pts.x(i)) + "," + detail::csv_number(pts.y(i)) + "," + role_name(pts.roles[i]) + "," +
             detail::provenance_label(pts.provenance[i]) + "\n";
    }
    return s;
}

inline void export_scatter(const ProjectedPoints& pts, const std::filesystem::path& path, ScatterFormat format) {
    detail::write_text(path, format == ScatterFormat::csv ? scatter_csv(pts) : detail::scatter_svg(pts));
}

}  // namespace bsentinel
