#include "dvps/rng.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace dvps {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(std::uint64_t seed) : root_seed_(seed) {
  std::uint64_t sm = seed;
  for (auto& s : state_) s = splitmix64(sm);
}

Rng Rng::stream(std::string_view name) const {
  return Rng(root_seed_ ^ fnv1a(name));
}

Rng Rng::stream(std::string_view name, std::uint64_t index) const {
  std::uint64_t mixed = root_seed_ ^ fnv1a(name);
  mixed += 0x9e3779b97f4a7c15ULL * (index + 1);
  return Rng(mixed);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::uniform_index: n must be > 0");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = ~0ULL - (~0ULL % n);
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return v % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u = 0.0;
  while (u == 0.0) u = uniform();
  const double r = std::sqrt(-2.0 * std::log(u));
  const double theta = 2.0 * 3.141592653589793238462643383279502884 * uniform();
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

double Rng::normal(double mean, double stddev) { return mean + stddev * normal(); }

std::array<std::uint64_t, 7> Rng::serialize() const {
  std::array<std::uint64_t, 7> words{};
  for (int i = 0; i < 4; ++i) words[static_cast<std::size_t>(i)] = state_[i];
  words[4] = root_seed_;
  words[5] = has_spare_ ? 1 : 0;
  std::uint64_t spare_bits = 0;
  static_assert(sizeof spare_bits == sizeof spare_);
  std::memcpy(&spare_bits, &spare_, sizeof spare_bits);
  words[6] = spare_bits;
  return words;
}

void Rng::deserialize(const std::array<std::uint64_t, 7>& words) {
  for (int i = 0; i < 4; ++i) state_[i] = words[static_cast<std::size_t>(i)];
  root_seed_ = words[4];
  has_spare_ = words[5] != 0;
  std::memcpy(&spare_, &words[6], sizeof spare_);
}

std::vector<int> Rng::permutation(int n) {
  std::vector<int> p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(uniform_index(static_cast<std::uint64_t>(i) + 1));
    std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
  }
  return p;
}

}  // namespace dvps
