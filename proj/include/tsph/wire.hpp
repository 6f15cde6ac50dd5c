#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tsph/common.hpp"
#include "tsph/sph.hpp"

namespace tsph::exchange {

enum class Phase : std::uint8_t {
  kDensity = 0,  // x, v, m, h, u
  kForce = 1,    // h, rho, omega
  kMigrate = 2,  // full records of particles changing owner
  kProxy = 3,    // full records mirrored into a neighbour's proxy cell at rebuild
};

std::string to_string(Phase p);

inline constexpr std::uint16_t kWireVersion = 1;
// magic(4) version(2) step(4) phase(1) cell(8) count(4) payload bytes(4)
inline constexpr std::size_t kHeaderBytes = 27;
inline constexpr std::size_t kDensityRecordBytes = 9 * 8;
inline constexpr std::size_t kForceRecordBytes = 3 * 8;
inline constexpr std::size_t kFullRecordBytes = 8 + 12 * 8 + 1;

// Migration and proxy transfers end with one marker per destination; its
// cell field is kMarkerCell | source rank and its count is the number of data
// messages that preceded it.
inline constexpr std::uint64_t kMarkerCell = std::uint64_t{1} << 63;

std::size_t record_bytes(Phase p);

struct Header {
  std::uint32_t step = 0;
  Phase phase = Phase::kDensity;
  std::uint64_t cell = 0;
  std::uint32_t count = 0;
  std::uint32_t payload_bytes = 0;

  std::string describe() const;
  bool operator==(const Header&) const = default;
};

struct Message {
  Header header;
  std::vector<std::uint8_t> payload;
};

// Header plus packed little-endian records.
std::vector<std::uint8_t> encode(const Message& m);
// Validates magic, version, phase and lengths; throws ProtocolError.
Message decode(std::span<const std::uint8_t> bytes);

Message make_message(Phase phase, std::uint32_t step, std::uint64_t cell, std::span<const sph::Particle> ps);
Message make_marker(Phase phase, std::uint32_t step, int source_rank, std::uint32_t data_messages);

// Overwrites the phase's fields of `out` (sizes must match) from the payload.
void apply_payload(const Message& m, std::span<sph::Particle> out);
// Full-record payloads decode to fresh particles.
std::vector<sph::Particle> decode_full(const Message& m);

}  // namespace tsph::exchange
