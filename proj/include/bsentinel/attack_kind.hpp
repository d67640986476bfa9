#pragma once

#include <array>
#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "errors.hpp"

namespace bsentinel {

/// The six trigger families, in canonical order. The numeric values are the
/// provenance codes used by every file format (0 is reserved for clean).
enum class AttackKind : std::uint8_t {
    badnets_sq = 1,
    badnets_px = 2,
    trojan_sq = 3,
    trojan_wm = 4,
    l2_inv = 5,
    l0_inv = 6,
};

inline constexpr std::array<AttackKind, 6> kAllAttacks{AttackKind::badnets_sq, AttackKind::badnets_px,
                                                       AttackKind::trojan_sq,  AttackKind::trojan_wm,
                                                       AttackKind::l2_inv,     AttackKind::l0_inv};

inline constexpr std::string_view attack_name(AttackKind kind) {
    switch (kind) {
        case AttackKind::badnets_sq: return "BadnetsSQ";
        case AttackKind::badnets_px: return "BadnetsPX";
        case AttackKind::trojan_sq: return "TrojanSQ";
        case AttackKind::trojan_wm: return "TrojanWM";
        case AttackKind::l2_inv: return "L2Inv";
        case AttackKind::l0_inv: return "L0Inv";
    }
    return "unknown";
}

inline std::size_t attack_index(AttackKind kind) { return static_cast<std::size_t>(kind) - 1; }

/// Accepts the canonical names and the dashed spellings ("Trojan-WM",
/// "l2-inv"), case-insensitively.
inline AttackKind parse_attack(std::string_view text) {
    auto squash = [](std::string_view s) {
        std::string out;
        for (char ch : s) {
            if (ch == '-' || ch == '_' || ch == ' ') continue;
            out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
        return out;
    };
    const std::string key = squash(text);
    for (AttackKind kind : kAllAttacks) {
        if (squash(attack_name(kind)) == key) return kind;
    }
    throw ConfigError("unknown attack kind '" + std::string(text) + "'");
}

/// Where a sample came from: clean, or backdoored by one attack kind.
class Provenance {
public:
    constexpr Provenance() = default;
    constexpr Provenance(AttackKind kind) : code_(static_cast<std::uint8_t>(kind)) {}  // NOLINT

    static constexpr Provenance clean() { return Provenance(); }

    static Provenance from_code(std::uint8_t code) {
        if (code > 6) throw DataError("invalid provenance code " + std::to_string(code));
        Provenance p;
        p.code_ = code;
        return p;
    }

    constexpr std::uint8_t code() const noexcept { return code_; }
    constexpr bool is_clean() const noexcept { return code_ == 0; }
    std::optional<AttackKind> attack() const {
        if (is_clean()) return std::nullopt;
        return static_cast<AttackKind>(code_);
    }

    std::string name() const { return is_clean() ? "clean" : std::string(attack_name(*attack())); }

    friend constexpr bool operator==(Provenance, Provenance) = default;
    friend constexpr auto operator<=>(Provenance, Provenance) = default;

private:
    std::uint8_t code_ = 0;
};

enum class DetectionLabel : std::uint8_t { clean = 0, backdoored = 1 };

inline DetectionLabel detection_label_for(Provenance p) {
    return p.is_clean() ? DetectionLabel::clean : DetectionLabel::backdoored;
}

}  // namespace bsentinel
