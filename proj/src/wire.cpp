#include "tsph/wire.hpp"

#include <bit>
#include <cstring>
#include <sstream>

namespace tsph::exchange {

namespace {

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void vec(const Vec3& v) {
    f64(v.x);
    f64(v.y);
    f64(v.z);
  }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t>& out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(le(8)); }
  Vec3 vec() {
    Vec3 v;
    v.x = f64();
    v.y = f64();
    v.z = f64();
    return v;
  }

 private:
  std::uint64_t le(int n) {
    if (pos_ + static_cast<std::size_t>(n) > in_.size()) throw ProtocolError("truncated message");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

void write_full(Writer& w, const sph::Particle& p) {
  w.u64(p.id);
  w.vec(p.x);
  w.vec(p.v);
  w.f64(p.u);
  w.f64(p.m);
  w.f64(p.h);
  w.vec(p.a_prev);
  w.u8(p.kicked ? 1 : 0);
}

}  // namespace

std::string to_string(Phase p) {
  switch (p) {
    case Phase::kDensity: return "density";
    case Phase::kForce: return "force";
    case Phase::kMigrate: return "migrate";
    case Phase::kProxy: return "proxy";
  }
  return "unknown(" + std::to_string(static_cast<int>(p)) + ")";
}

std::size_t record_bytes(Phase p) {
  switch (p) {
    case Phase::kDensity: return kDensityRecordBytes;
    case Phase::kForce: return kForceRecordBytes;
    case Phase::kMigrate:
    case Phase::kProxy: return kFullRecordBytes;
  }
  throw ProtocolError("unknown phase " + std::to_string(static_cast<int>(p)));
}

std::string Header::describe() const {
  std::ostringstream s;
  s << "{step " << step << ", phase " << to_string(phase) << ", cell " << cell << ", count " << count
    << ", payload " << payload_bytes << " B}";
  return s.str();
}

std::vector<std::uint8_t> encode(const Message& m) {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + m.payload.size());
  Writer w(out);
  for (char c : {'S', 'W', 'X', 'M'}) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kWireVersion);
  w.u32(m.header.step);
  w.u8(static_cast<std::uint8_t>(m.header.phase));
  w.u64(m.header.cell);
  w.u32(m.header.count);
  w.u32(static_cast<std::uint32_t>(m.payload.size()));
  out.insert(out.end(), m.payload.begin(), m.payload.end());
  return out;
}

Message decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes) throw ProtocolError("message shorter than its header (" + std::to_string(bytes.size()) + " B)");
  if (std::memcmp(bytes.data(), "SWXM", 4) != 0) throw ProtocolError("bad magic");
  Reader r(bytes.subspan(4));
  const auto version = r.u16();
  Message m;
  m.header.step = r.u32();
  const auto phase = r.u8();
  m.header.cell = r.u64();
  m.header.count = r.u32();
  m.header.payload_bytes = r.u32();
  if (version != kWireVersion) throw ProtocolError("unsupported wire version " + std::to_string(version));
  if (phase > static_cast<std::uint8_t>(Phase::kProxy)) throw ProtocolError("unknown phase " + std::to_string(phase));
  m.header.phase = static_cast<Phase>(phase);
  if (bytes.size() != kHeaderBytes + m.header.payload_bytes) {
    throw ProtocolError("length mismatch for " + m.header.describe() + ": got " + std::to_string(bytes.size()) + " B");
  }
  const bool marker = (m.header.cell & kMarkerCell) != 0;
  if (!marker && m.header.payload_bytes != m.header.count * record_bytes(m.header.phase)) {
    throw ProtocolError("payload size does not match record count in " + m.header.describe());
  }
  m.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderBytes), bytes.end());
  return m;
}

Message make_message(Phase phase, std::uint32_t step, std::uint64_t cell, std::span<const sph::Particle> ps) {
  Message m;
  m.header.step = step;
  m.header.phase = phase;
  m.header.cell = cell;
  m.header.count = static_cast<std::uint32_t>(ps.size());
  m.payload.reserve(ps.size() * record_bytes(phase));
  Writer w(m.payload);
  for (const auto& p : ps) {
    switch (phase) {
      case Phase::kDensity:
        w.vec(p.x);
        w.vec(p.v);
        w.f64(p.m);
        w.f64(p.h);
        w.f64(p.u);
        break;
      case Phase::kForce:
        w.f64(p.h);
        w.f64(p.rho);
        w.f64(p.omega);
        break;
      case Phase::kMigrate:
      case Phase::kProxy:
        write_full(w, p);
        break;
    }
  }
  m.header.payload_bytes = static_cast<std::uint32_t>(m.payload.size());
  return m;
}

Message make_marker(Phase phase, std::uint32_t step, int source_rank, std::uint32_t data_messages) {
  Message m;
  m.header.step = step;
  m.header.phase = phase;
  m.header.cell = kMarkerCell | static_cast<std::uint64_t>(source_rank);
  m.header.count = data_messages;
  return m;
}

void apply_payload(const Message& m, std::span<sph::Particle> out) {
  if (out.size() != m.header.count) {
    throw ProtocolError("message " + m.header.describe() + " carries " + std::to_string(m.header.count) +
                        " particles, proxy cell holds " + std::to_string(out.size()));
  }
  Reader r(m.payload);
  for (auto& p : out) {
    switch (m.header.phase) {
      case Phase::kDensity:
        p.x = r.vec();
        p.v = r.vec();
        p.m = r.f64();
        p.h = r.f64();
        p.u = r.f64();
        break;
      case Phase::kForce:
        p.h = r.f64();
        p.rho = r.f64();
        p.omega = r.f64();
        break;
      default:
        throw ProtocolError("apply_payload: full-record message " + m.header.describe());
    }
  }
}

std::vector<sph::Particle> decode_full(const Message& m) {
  if (m.header.phase != Phase::kMigrate && m.header.phase != Phase::kProxy) {
    throw ProtocolError("decode_full: not a full-record message " + m.header.describe());
  }
  Reader r(m.payload);
  std::vector<sph::Particle> out(m.header.count);
  for (auto& p : out) {
    p.id = r.u64();
    p.x = r.vec();
    p.v = r.vec();
    p.u = r.f64();
    p.m = r.f64();
    p.h = r.f64();
    p.a_prev = r.vec();
    p.kicked = r.u8() != 0;
  }
  return out;
}

}  // namespace tsph::exchange
