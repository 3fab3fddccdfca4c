#ifndef CAASR_HASH_HPP
#define CAASR_HASH_HPP

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace caasr {

/// FNV-1a over bytes. Stable across platforms and runs; used for seed
/// derivation, never for integrity.
std::uint64_t fnv1a64(std::string_view data);
std::uint64_t fnv1a64_mix(std::uint64_t h, std::uint64_t v);

/// Child seed for a stochastic consumer. Derivation is a pure function of
/// (master seed, component name, item ids), so adding or reordering
/// parallel work never shifts the stream any consumer sees.
std::uint64_t derive_seed(std::uint64_t master, std::string_view component,
                          std::uint64_t a = 0, std::uint64_t b = 0);

/// SHA-256, hex-encoded. Used for parameter-array and artifact hashing in
/// manifests and the stage-isolation checks.
std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(std::string_view data);

}  // namespace caasr

#endif  // CAASR_HASH_HPP
