#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace mnarjm {

using Rng = std::mt19937_64;

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// Derive an independent stream from a master seed and a path of indices,
// e.g. {replication, stage, multiple}. Depends on nothing but its arguments.
inline Rng make_stream(std::uint64_t master_seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = detail::splitmix64(master_seed);
  for (auto p : path) h = detail::splitmix64(h ^ detail::splitmix64(p + 0x632be59bd9b4e019ULL));
  std::seed_seq seq{static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32),
                    static_cast<std::uint32_t>(master_seed), static_cast<std::uint32_t>(master_seed >> 32)};
  return Rng(seq);
}

// Fork a child stream off a parent. Consumes one draw from the parent.
inline Rng fork_stream(Rng& parent) { return make_stream(parent(), {}); }

}  // namespace mnarjm
