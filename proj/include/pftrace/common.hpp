#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pftrace {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

// ---- errors ----

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
    virtual const char* kind() const noexcept { return "error"; }
};

struct ContractViolation : Error {
    using Error::Error;
    const char* kind() const noexcept override { return "contract_violation"; }
};

struct FormatError : Error {
    using Error::Error;
    const char* kind() const noexcept override { return "format_error"; }
};

struct VersionError : FormatError {
    using FormatError::FormatError;
    const char* kind() const noexcept override { return "version_error"; }
};

struct TrainingDiverged : Error {
    using Error::Error;
    const char* kind() const noexcept override { return "training_diverged"; }
};

struct NoSuccessfulEvent : Error {
    using Error::Error;
    const char* kind() const noexcept override { return "no_successful_event"; }
};

struct PreconditionError : Error {
    using Error::Error;
    const char* kind() const noexcept override { return "precondition_error"; }
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ContractViolation(what);
}

// ---- hashing and seed derivation ----

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) {
    return fnv1a(s.data(), s.size(), h);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Child seed for a named component: splitmix64(parent ^ fnv1a(name)).
inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view component) {
    return splitmix64(parent ^ fnv1a(component));
}

inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view component,
                                 std::uint64_t index) {
    return splitmix64(derive_seed(parent, component) + splitmix64(index));
}

template <class T>
std::uint64_t hash_values(const std::vector<T>& v, std::uint64_t h = kFnvOffset) {
    return fnv1a(v.data(), v.size() * sizeof(T), h);
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

using Rng = std::mt19937_64;

// Fisher-Yates with an explicit uniform draw; std::shuffle's exact sequence is
// implementation-defined.
template <class T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(v[i - 1], v[j]);
    }
}

inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace pftrace
