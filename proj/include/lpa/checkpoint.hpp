#pragma once

// Checkpoint archive:
//   "ATTNCK01" | u32 version | u8 att | u8 compat | u8 head | u32 classes |
//   u32 width_divisor | u32 epoch | u64 seed | u32 count |
//   count x { u16 name_len, name, u8 rank, u32 dims[rank], f32 values } |
//   u8 has_momentum | [count x f32 values] | u32 crc32(all preceding bytes)
// All integers and floats little-endian.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lpa/binary_io.hpp"
#include "lpa/model.hpp"

namespace lpa {

inline constexpr std::array<char, 8> kCheckpointMagic{'A', 'T', 'T', 'N', 'C', 'K', '0', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  ModelConfig config;
  /// Number of completed epochs.
  std::uint32_t epoch = 0;
  std::uint64_t seed = 0;
  std::vector<NamedTensor> parameters;
  /// Momentum buffers in parameter order; empty when no optimizer state is saved.
  std::vector<Tensor<float>> momentum;
};

template <typename T>
Checkpoint make_checkpoint(const Network<T>& net, std::uint32_t epoch, std::uint64_t seed,
                           const std::vector<Tensor<float>>& momentum = {}) {
  Checkpoint ck{net.config(), epoch, seed, {}, momentum};
  for (const Parameter<T>& p : net.parameters()) ck.parameters.push_back({p.name, p.value.template cast<float>()});
  return ck;
}

/// Copies checkpoint values into `net`, matching by identifier.
template <typename T>
void restore_parameters(Network<T>& net, const Checkpoint& ck) {
  if (!(ck.config == net.config()))
    throw ConfigError("checkpoint is for " + ck.config.name() + ", network is " + net.config().name());
  if (ck.parameters.size() != net.parameters().size())
    throw FormatError("checkpoint holds " + std::to_string(ck.parameters.size()) + " parameters, network has " +
                      std::to_string(net.parameters().size()));
  for (const NamedTensor& nt : ck.parameters) {
    Parameter<T>* p = net.find(nt.name);
    if (!p) throw FormatError("checkpoint parameter '" + nt.name + "' does not exist in " + net.config().name());
    if (p->value.shape() != nt.value.shape())
      throw FormatError("checkpoint parameter '" + nt.name + "' has shape " + shape_string(nt.value.shape()) +
                        ", expected " + shape_string(p->value.shape()));
    p->value = nt.value.template cast<T>();
  }
}

template <typename T>
Network<T> network_from_checkpoint(const Checkpoint& ck) {
  Network<T> net = Network<T>::build(ck.config, 0);
  restore_parameters(net, ck);
  return net;
}

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  for (char c : kCheckpointMagic) w.put(static_cast<std::uint8_t>(c));
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint8_t>(ck.config.att));
  w.put(static_cast<std::uint8_t>(ck.config.compat == Compatibility::parametrised));
  w.put(static_cast<std::uint8_t>(ck.config.head == HeadMode::indep));
  w.put(static_cast<std::uint32_t>(ck.config.num_classes));
  w.put(static_cast<std::uint32_t>(ck.config.width_divisor));
  w.put(ck.epoch);
  w.put(ck.seed);
  w.put(static_cast<std::uint32_t>(ck.parameters.size()));
  for (const NamedTensor& nt : ck.parameters) {
    w.put_string(nt.name);
    w.put(static_cast<std::uint8_t>(nt.value.rank()));
    for (std::size_t d : nt.value.shape()) w.put(static_cast<std::uint32_t>(d));
    w.put_array(nt.value.values());
  }
  w.put(static_cast<std::uint8_t>(!ck.momentum.empty()));
  if (!ck.momentum.empty()) {
    if (ck.momentum.size() != ck.parameters.size()) throw FormatError("momentum buffer count differs from parameters");
    for (std::size_t i = 0; i < ck.momentum.size(); ++i) {
      if (ck.momentum[i].shape() != ck.parameters[i].value.shape())
        throw FormatError("momentum buffer for '" + ck.parameters[i].name + "' has the wrong shape");
      w.put_array(ck.momentum[i].values());
    }
  }
  w.put(crc32_of(w.bytes()));
  return std::move(w.bytes());
}

inline Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "checkpoint");
  auto magic = r.get_bytes(kCheckpointMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin())) throw MagicError("checkpoint: bad magic bytes");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint: unsupported format version " + std::to_string(version));
  if (bytes.size() < 4) throw FormatError("checkpoint: truncated");
  {
    ByteReader tail(bytes.subspan(bytes.size() - 4), "checkpoint");
    if (crc32_of(bytes.first(bytes.size() - 4)) != tail.get<std::uint32_t>())
      throw ChecksumError("checkpoint: checksum mismatch");
  }
  Checkpoint ck;
  ck.config.att = r.get<std::uint8_t>();
  const auto compat = r.get<std::uint8_t>();
  const auto head = r.get<std::uint8_t>();
  if (compat > 1 || head > 1) throw FormatError("checkpoint: bad compatibility/head code");
  ck.config.compat = compat ? Compatibility::parametrised : Compatibility::dot_product;
  ck.config.head = head ? HeadMode::indep : HeadMode::concat;
  ck.config.num_classes = r.get<std::uint32_t>();
  ck.config.width_divisor = r.get<std::uint32_t>();
  try {
    ck.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  ck.epoch = r.get<std::uint32_t>();
  ck.seed = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  if (count > r.remaining()) throw FormatError("checkpoint: implausible parameter count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_string();
    const auto rank = r.get<std::uint8_t>();
    Shape shape;
    std::size_t elements = 1;
    for (int d = 0; d < rank; ++d) {
      const auto extent = r.get<std::uint32_t>();
      if (extent == 0) throw FormatError("checkpoint: zero extent in '" + name + "'");
      shape.push_back(extent);
      elements *= extent;
      if (elements > r.remaining()) throw FormatError("checkpoint: truncated payload for '" + name + "'");
    }
    Tensor<float> value(shape);
    r.get_array(value.values());
    ck.parameters.push_back({std::move(name), std::move(value)});
  }
  const auto has_momentum = r.get<std::uint8_t>();
  if (has_momentum > 1) throw FormatError("checkpoint: bad momentum flag");
  if (has_momentum) {
    for (const NamedTensor& nt : ck.parameters) {
      Tensor<float> m(nt.value.shape());
      r.get_array(m.values());
      ck.momentum.push_back(std::move(m));
    }
  }
  if (r.remaining() != 4) throw FormatError("checkpoint: unexpected trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace lpa
