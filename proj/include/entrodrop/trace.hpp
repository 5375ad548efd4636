#pragma once

#include <algorithm>
#include <bit>
#include <compare>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "entrodrop/checksum.hpp"
#include "entrodrop/error.hpp"
#include "entrodrop/numerics.hpp"
#include "entrodrop/rng.hpp"

namespace entrodrop {

enum class Position : std::uint8_t { PreAttention = 0, PostAttention = 1, PostMLP = 2 };

inline const char* to_string(Position p) {
  switch (p) {
    case Position::PreAttention: return "pre_attention";
    case Position::PostAttention: return "post_attention";
    case Position::PostMLP: return "post_mlp";
  }
  return "?";
}

struct SnapshotLabel {
  std::uint32_t layer_index = 0;
  Position position = Position::PreAttention;

  friend auto operator<=>(const SnapshotLabel&, const SnapshotLabel&) = default;
};

inline std::string to_string(const SnapshotLabel& label) {
  return "layer " + std::to_string(label.layer_index) + " " + to_string(label.position);
}

struct Snapshot {
  SnapshotLabel label;
  Matrix values;  // token_count x hidden_dim

  friend bool operator==(const Snapshot&, const Snapshot&) = default;
};

/// Residual-stream snapshots of one calibration run. A complete trace for an
/// L-layer model holds 2L+1 snapshots: the embedding output (layer 0,
/// PreAttention) followed by PostAttention and PostMLP for every layer.
struct ActivationTrace {
  std::size_t hidden_dim = 0;
  std::size_t token_count = 0;
  std::vector<Snapshot> snapshots;
  std::string source;
  std::uint64_t seed = 0;

  friend bool operator==(const ActivationTrace&, const ActivationTrace&) = default;

  /// Throws FormatError/DataError describing the first broken invariant.
  void validate() const {
    if (snapshots.empty()) throw FormatError("trace has no snapshots");
    if (hidden_dim == 0 || token_count == 0) throw FormatError("trace has zero hidden_dim or token_count");
    for (std::size_t i = 0; i < snapshots.size(); ++i) {
      const auto& s = snapshots[i];
      if (s.values.rows() != token_count || s.values.cols() != hidden_dim) {
        throw FormatError("snapshot " + std::to_string(i) + " (" + to_string(s.label) + ") has shape " +
                          std::to_string(s.values.rows()) + "x" + std::to_string(s.values.cols()) +
                          ", expected " + std::to_string(token_count) + "x" + std::to_string(hidden_dim));
      }
      if (static_cast<unsigned>(s.label.position) > 2) throw FormatError("snapshot " + std::to_string(i) + " has invalid position");
      if (i > 0 && !(snapshots[i - 1].label < s.label)) {
        throw FormatError("snapshot " + std::to_string(i) + " (" + to_string(s.label) + ") is out of order");
      }
      if (!s.values.all_finite()) {
        throw DataError("snapshot " + std::to_string(i) + " (" + to_string(s.label) + ") contains non-finite values");
      }
    }
  }
};

/// How many token rows feed entropy estimation. Rows are drawn uniformly
/// without replacement and kept in their original order.
struct SamplePolicy {
  std::size_t max_tokens = 4096;
  std::uint64_t seed = 0;

  friend bool operator==(const SamplePolicy&, const SamplePolicy&) = default;
};

/// Sorted row indices selected by `policy` out of `token_count` rows.
inline std::vector<std::size_t> select_rows(std::size_t token_count, const SamplePolicy& policy) {
  require(policy.max_tokens >= 2, "sample policy max_tokens must be >= 2");
  std::vector<std::size_t> idx(token_count);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (policy.max_tokens >= token_count) return idx;
  Rng rng(policy.seed);
  // partial Fisher-Yates: the first max_tokens slots become the sample
  for (std::size_t i = 0; i < policy.max_tokens; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(token_count - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(policy.max_tokens);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename T>
BasicMatrix<T> take_rows(const BasicMatrix<T>& m, std::span<const std::size_t> rows) {
  BasicMatrix<T> out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) std::ranges::copy(m.row(rows[i]), out.row(i).begin());
  return out;
}

/// Applies the same row selection to every snapshot.
inline ActivationTrace subsample(const ActivationTrace& trace, const SamplePolicy& policy) {
  const auto rows = select_rows(trace.token_count, policy);
  if (rows.size() == trace.token_count) return trace;
  ActivationTrace out;
  out.hidden_dim = trace.hidden_dim;
  out.token_count = rows.size();
  out.source = trace.source;
  out.seed = trace.seed;
  out.snapshots.reserve(trace.snapshots.size());
  for (const auto& s : trace.snapshots) out.snapshots.push_back({s.label, take_rows(s.values, rows)});
  return out;
}

// ---------------------------------------------------------------------------
// ETRC v1 binary format (all integers little-endian):
//   "ETRC" | version u16 | hidden_dim u32 | token_count u32 | snapshot_count u32
//   | seed u64 | source_len u16 | source bytes (UTF-8)
//   then per snapshot: layer_index u32 | position u8 | payload f32[token_count*hidden_dim]
//   (row-major) | CRC-32 of the payload bytes u32

inline constexpr std::uint16_t kEtrcVersion = 1;
inline constexpr char kEtrcMagic[4] = {'E', 'T', 'R', 'C'};

namespace detail {

class ByteWriter {
 public:
  std::vector<std::byte>& bytes() { return out_; }

  template <typename U>
  void put(U value) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::byte>((value >> (8 * i)) & 0xFF));
  }
  void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void put_raw(std::string_view s) {
    for (char c : s) out_.push_back(static_cast<std::byte>(c));
  }

 private:
  std::vector<std::byte> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::byte> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw CorruptionError(std::string("truncated while reading ") + what, bytes_.size());
  }

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      value |= static_cast<U>(std::to_integer<unsigned>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return value;
  }

  std::span<const std::byte> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::byte> encode_trace(const ActivationTrace& trace) {
  trace.validate();
  require(trace.source.size() <= 0xFFFF, "trace source string longer than 65535 bytes");
  require(trace.hidden_dim <= 0xFFFFFFFFu && trace.token_count <= 0xFFFFFFFFu, "trace dimensions exceed u32");
  detail::ByteWriter w;
  w.put_raw({kEtrcMagic, 4});
  w.put(kEtrcVersion);
  w.put(static_cast<std::uint32_t>(trace.hidden_dim));
  w.put(static_cast<std::uint32_t>(trace.token_count));
  w.put(static_cast<std::uint32_t>(trace.snapshots.size()));
  w.put(trace.seed);
  w.put(static_cast<std::uint16_t>(trace.source.size()));
  w.put_raw(trace.source);
  for (const auto& s : trace.snapshots) {
    w.put(s.label.layer_index);
    w.put(static_cast<std::uint8_t>(s.label.position));
    const std::size_t start = w.bytes().size();
    for (float v : s.values.data()) w.put_f32(v);
    const auto payload = std::span<const std::byte>(w.bytes()).subspan(start);
    w.put(crc32(payload));
  }
  return std::move(w.bytes());
}

/// Writes `trace` as ETRC and returns the number of bytes written.
inline std::uint64_t write_trace(const ActivationTrace& trace, std::ostream& sink) {
  const auto bytes = encode_trace(trace);
  const auto start = sink.tellp();
  sink.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  sink.flush();
  if (!sink) {
    const auto at = sink.tellp();
    const std::uint64_t offset = (at >= 0 && start >= 0) ? static_cast<std::uint64_t>(at - start) : 0;
    throw IoError("failed writing trace (" + std::to_string(bytes.size()) + " bytes)", offset);
  }
  return bytes.size();
}

inline ActivationTrace decode_trace(std::span<const std::byte> bytes) {
  detail::ByteReader r(bytes);
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kEtrcMagic, 4) != 0) throw FormatError("bad magic: not an ETRC trace");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kEtrcVersion) throw UnsupportedVersionError(version);

  ActivationTrace trace;
  trace.hidden_dim = r.get<std::uint32_t>("hidden_dim");
  trace.token_count = r.get<std::uint32_t>("token_count");
  const auto snapshot_count = r.get<std::uint32_t>("snapshot_count");
  trace.seed = r.get<std::uint64_t>("seed");
  const auto source_len = r.get<std::uint16_t>("source_len");
  const auto source = r.take(source_len, "source");
  trace.source.assign(reinterpret_cast<const char*>(source.data()), source.size());
  if (snapshot_count == 0) throw FormatError("trace has no snapshots");

  if (trace.hidden_dim != 0 && trace.token_count > r.remaining() / 4 / trace.hidden_dim) {
    r.need(r.remaining() + 1, "snapshot payloads");
  }
  const std::size_t values = trace.hidden_dim * trace.token_count;
  const std::size_t per_snapshot = 5 + 4 * values + 4;
  // refuse to allocate for a header that the remaining bytes cannot satisfy
  if (r.remaining() / per_snapshot < snapshot_count) {
    r.need(per_snapshot * static_cast<std::size_t>(snapshot_count), "snapshot payloads");
  }
  trace.snapshots.reserve(snapshot_count);
  for (std::uint32_t i = 0; i < snapshot_count; ++i) {
    Snapshot s;
    s.label.layer_index = r.get<std::uint32_t>("layer_index");
    const auto position = r.get<std::uint8_t>("position");
    if (position > 2) throw FormatError("snapshot " + std::to_string(i) + " has invalid position " + std::to_string(position));
    s.label.position = static_cast<Position>(position);
    const std::size_t payload_at = r.offset();
    const auto payload = r.take(4 * values, "payload");
    const auto stored = r.get<std::uint32_t>("payload checksum");
    if (crc32(payload) != stored) {
      throw CorruptionError("checksum mismatch in snapshot " + std::to_string(i) + " (" + to_string(s.label) + ")",
                            payload_at);
    }
    std::vector<float> data(values);
    for (std::size_t v = 0; v < values; ++v) {
      std::uint32_t bits = 0;
      for (std::size_t b = 0; b < 4; ++b) bits |= std::to_integer<std::uint32_t>(payload[4 * v + b]) << (8 * b);
      data[v] = std::bit_cast<float>(bits);
    }
    s.values = Matrix(trace.token_count, trace.hidden_dim, std::move(data));
    trace.snapshots.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw FormatError(std::to_string(r.remaining()) + " trailing bytes after last snapshot");
  trace.validate();
  return trace;
}

inline ActivationTrace read_trace(std::istream& source) {
  std::vector<char> buffer{std::istreambuf_iterator<char>(source), std::istreambuf_iterator<char>()};
  if (source.bad()) throw IoError("failed reading trace stream", buffer.size());
  return decode_trace(std::as_bytes(std::span(buffer)));
}

inline ActivationTrace load_trace(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open trace file '" + path + "'", 0);
  return read_trace(in);
}

inline std::uint64_t save_trace(const ActivationTrace& trace, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create trace file '" + path + "'", 0);
  return write_trace(trace, out);
}

}  // namespace entrodrop
