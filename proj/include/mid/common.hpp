#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mid {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
[[noreturn]] inline void fail(const char* expr, const char* file, int line, const std::string& msg) {
  std::ostringstream os;
  os << "check failed: " << expr << " (" << file << ":" << line << ")";
  if (!msg.empty()) os << ": " << msg;
  throw Error(os.str());
}
}  // namespace detail

// Always-on contract check; never compiled out.
#define MID_CHECK(cond, msg)                                        \
  do {                                                              \
    if (!(cond)) {                                                  \
      std::ostringstream mid_check_os_;                             \
      mid_check_os_ << msg;                                         \
      ::mid::detail::fail(#cond, __FILE__, __LINE__, mid_check_os_.str()); \
    }                                                               \
  } while (0)

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic RNG. All randomness in the project flows through this type so
// runs are reproducible bit-for-bit from a single seed. Streams derived with
// fork() are independent of each other and of the draw order on the parent.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x2545f4914f6cdd1dULL)) {}

  uint64_t next_u64() {
    state_ = splitmix64(state_);
    uint64_t z = state_;
    z = (z ^ (z >> 33)) * 0xff51afd7ed558ccdULL;
    z = (z ^ (z >> 33)) * 0xc4ceb9fe1a85ec53ULL;
    return z ^ (z >> 33);
  }

  // uniform in [0,1)
  float uniform() { return float(next_u64() >> 40) * (1.0f / 16777216.0f); }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  // standard normal, Box-Muller
  float normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    float u1 = uniform();
    float u2 = uniform();
    while (u1 <= 1e-12f) u1 = uniform();
    float r = std::sqrt(-2.0f * std::log(u1));
    float a = 6.28318530717958647692f * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  float normal(float mean, float stddev) { return mean + stddev * normal(); }

  // uniform integer in [0, n)
  int uniform_int(int n) {
    MID_CHECK(n > 0, "uniform_int needs n > 0");
    return int(next_u64() % uint64_t(n));
  }

  // Derive an independent stream keyed by up to three tags.
  Rng fork(uint64_t a, uint64_t b = 0, uint64_t c = 0) const {
    uint64_t s = state_;
    s = splitmix64(s ^ splitmix64(a ^ 0x517cc1b727220a95ULL));
    s = splitmix64(s ^ splitmix64(b ^ 0x6c62272e07bb0142ULL));
    s = splitmix64(s ^ splitmix64(c ^ 0xd6e8feb86659fd93ULL));
    return Rng(s);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = int(v.size()) - 1; i > 0; --i) {
      int j = uniform_int(i + 1);
      std::swap(v[i], v[size_t(j)]);
    }
  }

 private:
  uint64_t state_;
  float spare_ = 0.0f;
  bool have_spare_ = false;
};

// Horizontal stripe g of G over height H covers rows [floor(g*H/G), floor((g+1)*H/G)).
// Shared by region pooling and region mixup so the two partitions always agree.
inline std::pair<int, int> stripe_bounds(int height, int num_stripes, int g) {
  MID_CHECK(num_stripes >= 1 && num_stripes <= height,
            "stripe count " << num_stripes << " must be in [1, H=" << height << "]");
  MID_CHECK(g >= 0 && g < num_stripes, "stripe index out of range");
  int lo = (g * height) / num_stripes;
  int hi = ((g + 1) * height) / num_stripes;
  return {lo, hi};
}

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

}  // namespace mid
