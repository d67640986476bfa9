#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>

#include "encoders.hpp"
#include "errors.hpp"

namespace bsentinel {

/// Incremental SHA-256 (OpenSSL EVP).
class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw NumericError("SHA-256 init failed");
    }

    Sha256& update(const void* data, std::size_t n) {
        if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw NumericError("SHA-256 update failed");
        return *this;
    }
    Sha256& update(std::string_view s) { return update(s.data(), s.size()); }
    template <typename T>
    Sha256& update(std::span<const T> values) {
        return update(values.data(), values.size_bytes());
    }

    std::string hex() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
        unsigned int len = 0;
        if (EVP_DigestFinal_ex(ctx_.get(), md.data(), &len) != 1) throw NumericError("SHA-256 final failed");
        static constexpr char digits[] = "0123456789abcdef";
        std::string out;
        for (unsigned int i = 0; i < len; ++i) {
            out.push_back(digits[md[i] >> 4]);
            out.push_back(digits[md[i] & 15]);
        }
        return out;
    }

private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view data) { return Sha256().update(data).hex(); }

/// Digest over every frozen weight of the encoder stack, names included.
inline std::string encoder_weights_sha256(const EncoderStack& stack) {
    Sha256 h;
    for (const auto& tok : stack.vocab.tokens()) h.update(tok).update("\0", 1);
    h.update(stack.vocab.table().data());
    auto add = [&h](const std::string& name, const auto& tensor) {
        h.update(name);
        h.update(tensor.data());
    };
    stack.text.for_each_weight(add);
    stack.image.for_each_weight(add);
    return h.hex();
}

}  // namespace bsentinel
