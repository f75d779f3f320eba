// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <string_view>

#include "modlib/error.hpp"

namespace modlib {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

/// Incremental SHA-256 (OpenSSL EVP) with hex output.
class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
            throw Error("Sha256: digest initialisation failed");
        }
    }

    Sha256& update(std::span<const std::byte> bytes) {
        if (!bytes.empty() && EVP_DigestUpdate(ctx_.get(), bytes.data(), bytes.size()) != 1) {
            throw Error("Sha256: update failed");
        }
        return *this;
    }

    Sha256& update(std::string_view s) { return update(std::as_bytes(std::span(s.data(), s.size()))); }

    Sha256& update_u64(std::uint64_t v) {
        unsigned char buf[8];
        for (int i = 0; i < 8; ++i) {
            buf[i] = static_cast<unsigned char>(v >> (8 * i));
        }
        return update(std::as_bytes(std::span(buf)));
    }

    /// Values are hashed after rounding to f32, matching the on-disk precision.
    Sha256& update_f32(std::span<const double> values) {
        for (double v : values) {
            const float f = static_cast<float>(v);
            update(std::as_bytes(std::span(&f, 1)));
        }
        return *this;
    }

    Sha256& update_f64(std::span<const double> values) { return update(std::as_bytes(values)); }

    std::string hex() {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        if (EVP_DigestFinal_ex(ctx_.get(), md, &len) != 1) {
            throw Error("Sha256: finalisation failed");
        }
        static constexpr char digits[] = "0123456789abcdef";
        std::string out(2 * len, '0');
        for (unsigned int i = 0; i < len; ++i) {
            out[2 * i] = digits[md[i] >> 4];
            out[2 * i + 1] = digits[md[i] & 0xF];
        }
        return out;
    }

private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::span<const std::byte> bytes) { return Sha256().update(bytes).hex(); }

}  // namespace modlib
