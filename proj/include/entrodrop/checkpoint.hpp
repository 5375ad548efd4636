#pragma once

#include <cstring>
#include <fstream>
#include <iterator>

#include "entrodrop/model.hpp"
#include "entrodrop/trace.hpp"

namespace entrodrop {

// ETCK v1 named-tensor checkpoint (little-endian):
//   "ETCK" | version u16 | layers u32 | hidden_dim u32 | heads u32 | ffn_dim u32
//   | vocab u32 | max_seq u32 | seed u64 | tensor_count u32
//   then per tensor: name_len u16 | name | ndims u8 | dims u32[ndims]
//   | payload f32[prod(dims)] | CRC-32 of payload u32
// Tensors appear in named_tensors() order.

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::vector<std::byte> encode_checkpoint(const ToyModel& model) {
  const auto& c = model.config;
  detail::ByteWriter w;
  w.put_raw("ETCK");
  w.put(kCheckpointVersion);
  for (std::size_t v : {c.layers, c.hidden_dim, c.heads, c.ffn_dim, c.vocab, c.max_seq}) w.put(static_cast<std::uint32_t>(v));
  w.put(c.seed);
  const auto tensors = named_tensors(model.params);
  w.put(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    w.put(static_cast<std::uint16_t>(name.size()));
    w.put_raw(name);
    w.put(std::uint8_t{2});
    w.put(static_cast<std::uint32_t>(m->rows()));
    w.put(static_cast<std::uint32_t>(m->cols()));
    const std::size_t start = w.bytes().size();
    for (float v : m->data()) w.put_f32(v);
    w.put(crc32(std::span<const std::byte>(w.bytes()).subspan(start)));
  }
  return std::move(w.bytes());
}

inline ToyModel decode_checkpoint(std::span<const std::byte> bytes) {
  detail::ByteReader r(bytes);
  if (std::memcmp(r.take(4, "magic").data(), "ETCK", 4) != 0) throw FormatError("bad magic: not an ETCK checkpoint");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion) throw UnsupportedVersionError(version);
  ToyModelConfig c;
  c.layers = r.get<std::uint32_t>("layers");
  c.hidden_dim = r.get<std::uint32_t>("hidden_dim");
  c.heads = r.get<std::uint32_t>("heads");
  c.ffn_dim = r.get<std::uint32_t>("ffn_dim");
  c.vocab = r.get<std::uint32_t>("vocab");
  c.max_seq = r.get<std::uint32_t>("max_seq");
  c.seed = r.get<std::uint64_t>("seed");
  try {
    c.validate();
  } catch (const ContractViolation& e) {
    throw FormatError(std::string("checkpoint holds an invalid config: ") + e.what());
  }
  ToyModel model{c, ModelParams<float>::zeros_like(c)};
  auto tensors = named_tensors(model.params);
  const auto count = r.get<std::uint32_t>("tensor_count");
  if (count != tensors.size())
    throw FormatError("checkpoint has " + std::to_string(count) + " tensors, config implies " + std::to_string(tensors.size()));
  for (auto& [name, m] : tensors) {
    const auto len = r.get<std::uint16_t>("tensor name length");
    const auto raw = r.take(len, "tensor name");
    const std::string got(reinterpret_cast<const char*>(raw.data()), raw.size());
    if (got != name) throw FormatError("expected tensor '" + name + "', found '" + got + "'");
    const auto ndims = r.get<std::uint8_t>("ndims");
    if (ndims != 2) throw FormatError("tensor '" + name + "' has " + std::to_string(ndims) + " dims, expected 2");
    const auto rows = r.get<std::uint32_t>("dim");
    const auto cols = r.get<std::uint32_t>("dim");
    if (rows != m->rows() || cols != m->cols()) throw FormatError("tensor '" + name + "' has unexpected shape");
    const std::size_t at = r.offset();
    const auto payload = r.take(4 * m->size(), "tensor payload");
    if (crc32(payload) != r.get<std::uint32_t>("tensor checksum"))
      throw CorruptionError("checksum mismatch in tensor '" + name + "'", at);
    for (std::size_t i = 0; i < m->size(); ++i) {
      std::uint32_t bits = 0;
      for (std::size_t b = 0; b < 4; ++b) bits |= std::to_integer<std::uint32_t>(payload[4 * i + b]) << (8 * b);
      m->data()[i] = std::bit_cast<float>(bits);
    }
    if (!m->all_finite()) throw DataError("tensor '" + name + "' contains non-finite values");
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last tensor");
  return model;
}

inline void save_checkpoint(const ToyModel& model, const std::string& path) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint '" + path + "'", 0);
}

inline ToyModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'", 0);
  std::vector<char> buffer{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(std::as_bytes(std::span(buffer)));
}

}  // namespace entrodrop
