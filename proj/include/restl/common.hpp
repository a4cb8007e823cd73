#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace restl {

// Error categories map 1:1 onto CLI exit codes.
enum class ErrorKind { Config = 1, Data = 2, Numeric = 3 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void config_error(const std::string& msg) { throw Error(ErrorKind::Config, msg); }
[[noreturn]] inline void data_error(const std::string& msg) { throw Error(ErrorKind::Data, msg); }
[[noreturn]] inline void numeric_error(const std::string& msg) { throw Error(ErrorKind::Numeric, msg); }

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 output is fixed by the standard; the
// distributions below are hand-rolled so streams are identical across
// standard library implementations.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Mixes a seed with stream tags so every consumer gets an independent stream.
inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t h = splitmix64(seed ^ 0x6a09e667f3bcc908ULL);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    h = splitmix64(h ^ c);
    return h;
}

class Rng {
public:
    explicit Rng(uint64_t seed) : s_{} {
        uint64_t x = seed;
        for (auto& w : s_) w = x = splitmix64(x);
    }

    // xoshiro256** core.
    uint64_t next_u64() {
        auto rotl = [](uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
        uint64_t result = rotl(s_[1] * 5, 7) * 9;
        uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; consumes two uniforms per pair, caches the second draw.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    // Unbiased integer in [0, n) via rejection.
    uint64_t uniform_index(uint64_t n) {
        if (n == 0) return 0;
        uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t s_[4];
    bool have_cached_ = false;
    double cached_ = 0.0;
};

// ---------------------------------------------------------------------------
// Worker-count plumbing. Results never depend on the worker count: callers
// must write disjoint outputs per index and reduce in index order.
// ---------------------------------------------------------------------------

int default_workers();

inline void parallel_for(size_t begin, size_t end, int workers, const std::function<void(size_t)>& fn) {
    size_t n = end > begin ? end - begin : 0;
    if (n == 0) return;
    size_t w = workers > 0 ? static_cast<size_t>(workers) : 1;
    if (w > n) w = n;
    if (w <= 1) {
        for (size_t i = begin; i < end; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(w);
    std::exception_ptr first_error = nullptr;
    std::mutex err_mu;
    for (size_t t = 0; t < w; ++t) {
        pool.emplace_back([&, t]() {
            try {
                for (size_t i = begin + t; i < end; i += w) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

// FNV-1a, used for cheap content hashes (model immutability checks, reports).
inline uint64_t fnv1a64(const void* data, size_t nbytes, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < nbytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <typename T>
uint64_t fnv1a64_vec(const std::vector<T>& v, uint64_t h = 0xcbf29ce484222325ULL) {
    return v.empty() ? h : fnv1a64(v.data(), v.size() * sizeof(T), h);
}

}  // namespace restl
