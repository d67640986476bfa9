#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "attack_kind.hpp"
#include "errors.hpp"
#include "image.hpp"
#include "rng.hpp"

namespace bsentinel {

enum class Corner { bottom_right, bottom_left, top_right, top_left };

inline std::string corner_name(Corner c) {
    switch (c) {
        case Corner::bottom_right: return "bottom-right";
        case Corner::bottom_left: return "bottom-left";
        case Corner::top_right: return "top-right";
        case Corner::top_left: return "top-left";
    }
    return "bottom-right";
}

inline Corner parse_corner(const std::string& s) {
    for (Corner c : {Corner::bottom_right, Corner::bottom_left, Corner::top_right, Corner::top_left}) {
        if (corner_name(c) == s) return c;
    }
    throw ConfigError("unknown anchor '" + s + "'");
}

/// Declarative trigger description. Only the parameters relevant to `kind`
/// are used; the rest keep their defaults.
struct TriggerSpec {
    AttackKind kind = AttackKind::badnets_sq;
    std::size_t square = 3;     // side of the square patch (BadnetsSQ, TrojanSQ)
    std::size_t pixels = 3;     // isolated pixel count (BadnetsPX)
    std::size_t sparsity = 10;  // modified pixel positions (L0Inv)
    double epsilon = 2.0;       // L2 budget of the injected delta (L2Inv)
    double blend = 0.2;         // watermark opacity (TrojanWM)
    Corner anchor = Corner::bottom_right;
    std::size_t margin = 1;
    std::uint64_t seed = 0;

    static TriggerSpec defaults(AttackKind kind, std::uint64_t seed = 0) {
        TriggerSpec s;
        s.kind = kind;
        s.seed = seed;
        if (kind == AttackKind::trojan_sq) s.square = 5;
        return s;
    }

    void validate() const {
        switch (kind) {
            case AttackKind::badnets_sq:
            case AttackKind::trojan_sq:
                if (square < 1) throw ConfigError("square side must be at least 1");
                break;
            case AttackKind::badnets_px:
                if (pixels < 1) throw ConfigError("pixel count must be at least 1");
                break;
            case AttackKind::trojan_wm:
                if (!(blend > 0.0 && blend <= 1.0)) throw ConfigError("blend ratio must be in (0, 1]");
                break;
            case AttackKind::l2_inv:
                if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be positive");
                break;
            case AttackKind::l0_inv:
                if (sparsity < 1) throw ConfigError("sparsity budget k must be at least 1");
                break;
        }
    }

    friend bool operator==(const TriggerSpec&, const TriggerSpec&) = default;
};

inline void to_json(nlohmann::ordered_json& j, const TriggerSpec& s) {
    j = nlohmann::ordered_json{{"kind", std::string(attack_name(s.kind))},
                               {"square", s.square},
                               {"pixels", s.pixels},
                               {"sparsity", s.sparsity},
                               {"epsilon", s.epsilon},
                               {"blend", s.blend},
                               {"anchor", corner_name(s.anchor)},
                               {"margin", s.margin},
                               {"seed", s.seed}};
}

/// Parses a spec object. `kind` is required; missing parameters take the
/// per-kind defaults and unknown keys are rejected.
inline TriggerSpec trigger_spec_from_json(const nlohmann::ordered_json& j) {
    if (!j.is_object()) throw ConfigError("trigger spec must be a JSON object");
    if (!j.contains("kind")) throw ConfigError("trigger spec is missing 'kind'");
    try {
        TriggerSpec s = TriggerSpec::defaults(parse_attack(j.at("kind").get<std::string>()));
        for (const auto& [key, value] : j.items()) {
            if (key == "kind") continue;
            else if (key == "square") s.square = value.get<std::size_t>();
            else if (key == "pixels") s.pixels = value.get<std::size_t>();
            else if (key == "sparsity") s.sparsity = value.get<std::size_t>();
            else if (key == "epsilon") s.epsilon = value.get<double>();
            else if (key == "blend") s.blend = value.get<double>();
            else if (key == "anchor") s.anchor = parse_corner(value.get<std::string>());
            else if (key == "margin") s.margin = value.get<std::size_t>();
            else if (key == "seed") s.seed = value.get<std::uint64_t>();
            else throw ConfigError("unknown trigger spec key '" + key + "'");
        }
        s.validate();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad trigger spec: ") + e.what());
    }
}

/// Mask beta and pattern t of the blend (1 - beta) * x + beta * t.
struct TriggerRealization {
    ImageTensor mask;
    ImageTensor pattern;

    friend bool operator==(const TriggerRealization&, const TriggerRealization&) = default;
};

namespace detail {

/// Top-left corner of a rows x cols block placed at the spec's anchor.
inline std::pair<std::size_t, std::size_t> anchor_origin(const TriggerSpec& spec, const ImageShape& shape,
                                                         std::size_t rows, std::size_t cols, const char* what) {
    if (rows + spec.margin > shape.height || cols + spec.margin > shape.width) {
        throw ConfigError(std::string(what) + " of " + std::to_string(rows) + "x" + std::to_string(cols) +
                          " with margin " + std::to_string(spec.margin) + " does not fit a " + shape.str() + " image");
    }
    const bool bottom = spec.anchor == Corner::bottom_right || spec.anchor == Corner::bottom_left;
    const bool right = spec.anchor == Corner::bottom_right || spec.anchor == Corner::top_right;
    const std::size_t y = bottom ? shape.height - spec.margin - rows : spec.margin;
    const std::size_t x = right ? shape.width - spec.margin - cols : spec.margin;
    return {y, x};
}

inline void set_pixel(TriggerRealization& r, std::size_t y, std::size_t x, float beta, float value) {
    for (std::size_t c = 0; c < r.mask.shape().channels; ++c) {
        r.mask.at(c, y, x) = beta;
        r.pattern.at(c, y, x) = value;
    }
}

}  // namespace detail

/// Builds (beta, t) for an image shape. Deterministic in (spec, shape).
inline TriggerRealization realize_trigger(const TriggerSpec& spec, const ImageShape& shape) {
    spec.validate();
    TriggerRealization r{ImageTensor(shape, 0.0f), ImageTensor(shape, 0.0f)};
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(spec.kind)));
    const std::size_t h = shape.height, w = shape.width;

    switch (spec.kind) {
        case AttackKind::badnets_sq: {
            auto [y0, x0] = detail::anchor_origin(spec, shape, spec.square, spec.square, "square trigger");
            for (std::size_t y = 0; y < spec.square; ++y)
                for (std::size_t x = 0; x < spec.square; ++x) detail::set_pixel(r, y0 + y, x0 + x, 1.0f, 1.0f);
            break;
        }
        case AttackKind::badnets_px: {
            // Isolated white pixels on a stride-2 grid growing away from the corner.
            const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(spec.pixels))));
            const std::size_t extent = 2 * (side - 1) + 1;
            auto [y0, x0] = detail::anchor_origin(spec, shape, extent, extent, "pixel trigger");
            const bool bottom = spec.anchor == Corner::bottom_right || spec.anchor == Corner::bottom_left;
            const bool right = spec.anchor == Corner::bottom_right || spec.anchor == Corner::top_right;
            for (std::size_t i = 0; i < spec.pixels; ++i) {
                const std::size_t dy = 2 * (i / side), dx = 2 * (i % side);
                const std::size_t y = bottom ? y0 + extent - 1 - dy : y0 + dy;
                const std::size_t x = right ? x0 + extent - 1 - dx : x0 + dx;
                detail::set_pixel(r, y, x, 1.0f, 1.0f);
            }
            break;
        }
        case AttackKind::trojan_sq: {
            auto [y0, x0] = detail::anchor_origin(spec, shape, spec.square, spec.square, "square trigger");
            for (std::size_t y = 0; y < spec.square; ++y)
                for (std::size_t x = 0; x < spec.square; ++x)
                    detail::set_pixel(r, y0 + y, x0 + x, 1.0f, (x + y) % 2 == 0 ? 1.0f : 0.0f);
            break;
        }
        case AttackKind::trojan_wm: {
            // Seeded sinusoidal grid, blended over the whole image.
            const double fy = 3.0 + 3.0 * rng.uniform(), fx = 3.0 + 3.0 * rng.uniform();
            std::vector<double> phase(2 * shape.channels);
            for (auto& p : phase) p = 2.0 * std::numbers::pi * rng.uniform();
            const auto blend = static_cast<float>(spec.blend);
            for (std::size_t c = 0; c < shape.channels; ++c)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t x = 0; x < w; ++x) {
                        const double gy = std::sin(2.0 * std::numbers::pi * fy * static_cast<double>(y) / static_cast<double>(h) + phase[2 * c]);
                        const double gx = std::sin(2.0 * std::numbers::pi * fx * static_cast<double>(x) / static_cast<double>(w) + phase[2 * c + 1]);
                        r.mask.at(c, y, x) = blend;
                        r.pattern.at(c, y, x) = static_cast<float>(0.5 + 0.5 * gy * gx);
                    }
            break;
        }
        case AttackKind::l2_inv: {
            // Binary noise pattern behind a fractional mask with ||beta||_2 = epsilon.
            // Since |t - x| <= 1 elementwise, ||G(x) - x||_2 <= ||beta||_2 for every x.
            std::vector<double> weight(shape.size());
            double sq = 0.0;
            for (std::size_t i = 0; i < weight.size(); ++i) {
                weight[i] = 0.5 + rng.uniform();
                sq += weight[i] * weight[i];
                r.pattern[i] = rng.uniform() < 0.5 ? 0.0f : 1.0f;
            }
            const double factor = spec.epsilon / std::sqrt(sq);
            double norm_sq = 0.0;
            for (std::size_t i = 0; i < weight.size(); ++i) {
                auto beta = static_cast<float>(std::min(1.0, weight[i] * factor));
                r.mask[i] = beta;
                norm_sq += static_cast<double>(beta) * beta;
            }
            // float rounding may push the norm a hair above epsilon; shrink once if so.
            if (std::sqrt(norm_sq) > spec.epsilon) {
                const double shrink = spec.epsilon / std::sqrt(norm_sq) * (1.0 - 1e-7);
                for (std::size_t i = 0; i < weight.size(); ++i) r.mask[i] = static_cast<float>(r.mask[i] * shrink);
            }
            break;
        }
        case AttackKind::l0_inv: {
            if (spec.sparsity > h * w) {
                throw ConfigError("sparsity budget " + std::to_string(spec.sparsity) + " exceeds " +
                                  std::to_string(h * w) + " pixel positions");
            }
            for (std::size_t pos : rng.sample_without_replacement(h * w, spec.sparsity)) {
                const std::size_t y = pos / w, x = pos % w;
                for (std::size_t c = 0; c < shape.channels; ++c) {
                    r.mask.at(c, y, x) = 1.0f;
                    r.pattern.at(c, y, x) = static_cast<float>(rng.uniform());
                }
            }
            break;
        }
    }
    return r;
}

inline bool has_binary_mask(AttackKind kind) { return kind != AttackKind::trojan_wm && kind != AttackKind::l2_inv; }

/// clamp((1 - beta) * x + beta * t) into [0, 1]. `x` is untouched.
inline ImageTensor apply_trigger(const ImageTensor& x, const TriggerRealization& r) {
    if (!(x.shape() == r.mask.shape()) || x.size() != r.mask.size()) {
        throw ShapeError("trigger for " + r.mask.shape().str() + " applied to image " + x.shape().str());
    }
    ImageTensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const float beta = r.mask[i];
        out[i] = std::clamp((1.0f - beta) * x[i] + beta * r.pattern[i], 0.0f, 1.0f);
    }
    return out;
}

/// All-to-one label generator: every label maps to `target`.
inline std::uint32_t poison_label(std::uint32_t label, std::uint32_t target, std::uint32_t num_classes) {
    if (label >= num_classes) throw ConfigError("label " + std::to_string(label) + " out of range [0, " + std::to_string(num_classes) + ")");
    if (target >= num_classes) throw ConfigError("target " + std::to_string(target) + " out of range [0, " + std::to_string(num_classes) + ")");
    return target;
}

}  // namespace bsentinel
