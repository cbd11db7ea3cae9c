#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>
#include <vector>

namespace pbd {

// Deterministic, splittable generator.
//
// Streams are derived from a root seed plus a path of tags (strings or
// integers), so a per-sample stream depends only on (seed, tag, index) and
// never on the order in which samples are visited. The engine and
// std::seed_seq are fully specified by the standard; the conversions to
// bounded integers and reals are done here because std distributions are
// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : Rng(std::vector<std::uint64_t>{seed}) {}

  std::uint64_t next() { return engine_(); }

  // Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound) {
    // rejection sampling on the top of the range keeps the draw unbiased
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
    std::uint64_t v = next();
    while (v >= limit) v = next();
    return v % bound;
  }

  // Uniform integer in [lo, hi].
  std::int64_t between(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  // Uniform real in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  template <typename T>
  const T& pick(const std::vector<T>& items) {
    return items[below(items.size())];
  }

  // Child stream for a (tag, index) pair.
  Rng derive(std::string_view tag, std::uint64_t index = 0) const {
    std::vector<std::uint64_t> path = path_;
    path.push_back(hash_tag(tag));
    path.push_back(index);
    return Rng(std::move(path));
  }

  std::uint64_t root_seed() const { return path_.front(); }

  static std::uint64_t hash_tag(std::string_view tag) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : tag) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }

 private:
  explicit Rng(std::vector<std::uint64_t> path) : path_(std::move(path)) {
    std::vector<std::uint32_t> words;
    words.reserve(path_.size() * 2);
    for (std::uint64_t p : path_) {
      words.push_back(static_cast<std::uint32_t>(p));
      words.push_back(static_cast<std::uint32_t>(p >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    engine_.seed(seq);
  }

  std::vector<std::uint64_t> path_;
  std::mt19937_64 engine_;
};

}  // namespace pbd
