// SPDX-License-Identifier: Apache-2.0

#include "seqjepa/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "seqjepa/config.hpp"
#include "seqjepa/errors.hpp"

namespace seqjepa {
namespace {

constexpr char kMagic[4] = {'S', 'J', 'C', 'K'};

class Writer {
 public:
  template <typename U>
  void put(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void bytes(const std::string& s) { buf_ += s; }
  void text(const std::string& s) {
    put<std::uint64_t>(s.size());
    bytes(s);
  }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::string bytes(std::uint64_t n) {
    need(n);
    std::string s = data_.substr(pos_, static_cast<std::size_t>(n));
    pos_ += static_cast<std::size_t>(n);
    return s;
  }
  std::string text() { return bytes(get<std::uint64_t>()); }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > data_.size() - pos_) throw FormatError("checkpoint '" + path_ + "' is truncated");
  }
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::string manifest_text(const CheckpointManifest& m) {
  char tau[40];
  std::snprintf(tau, sizeof tau, "%a", m.tau);
  std::ostringstream os;
  os << "version = " << m.version << "\n"
     << "config_hash = " << hex64(m.config_hash) << "\n"
     << "step = " << m.step << "\n"
     << "tau = " << tau << "\n"
     << "seed = " << m.seed << "\n"
     << "optimizer_steps = " << m.optimizer_steps << "\n";
  return os.str();
}

CheckpointManifest parse_manifest(const std::string& text, const std::string& path) {
  CheckpointManifest m;
  try {
    const KeyValueConfig kv = KeyValueConfig::parse(text);
    for (const char* key : {"version", "config_hash", "step", "tau", "seed", "optimizer_steps"}) {
      if (!kv.contains(key)) throw FormatError("checkpoint '" + path + "': manifest lacks '" + key + "'");
    }
    m.version = static_cast<std::uint32_t>(kv.get_int("version", 0));
    m.config_hash = std::stoull(*kv.get("config_hash"), nullptr, 16);
    m.step = kv.get_int("step", 0);
    m.tau = std::strtod(kv.get("tau")->c_str(), nullptr);
    m.seed = std::stoull(*kv.get("seed"));
    m.optimizer_steps = kv.get_int("optimizer_steps", 0);
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError("checkpoint '" + path + "': malformed manifest (" + e.what() + ")");
  }
  return m;
}

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  Writer w;
  w.bytes(std::string(kMagic, 4));
  w.put<std::uint32_t>(ckpt.manifest.version);
  w.text(manifest_text(ckpt.manifest));
  w.text(ckpt.config_text);
  w.put<std::uint64_t>(ckpt.arrays.size());
  for (const auto& a : ckpt.arrays) {
    std::uint64_t n = 1;
    for (auto d : a.dims) n *= d;
    if (n != a.data.size()) throw ShapeError("checkpoint array '" + a.name + "' size does not match its dims");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(a.name.size()));
    w.bytes(a.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(a.dims.size()));
    for (auto d : a.dims) w.put<std::uint64_t>(d);
    for (float v : a.data) w.put<std::uint32_t>(std::bit_cast<std::uint32_t>(v));
  }
  w.put<std::uint64_t>(fnv1a64(w.buffer()));

  const std::filesystem::path target(path);
  const std::filesystem::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint '" + tmp.string() + "'");
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw Error("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, target);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  const std::string data((std::istreambuf_iterator<char>(in)), {});
  if (data.size() < 4 + 4 + 8 || data.compare(0, 4, kMagic, 4) != 0) {
    throw FormatError("'" + path + "' is not a checkpoint");
  }
  Reader r(data, path);
  r.bytes(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint '" + path + "' has format version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
  }
  if (data.size() < 8 + 8) throw FormatError("checkpoint '" + path + "' is truncated");
  Reader tail(data, path);
  tail.bytes(data.size() - 8);
  const auto stored_sum = tail.get<std::uint64_t>();
  if (stored_sum != fnv1a64(std::string_view(data).substr(0, data.size() - 8))) {
    throw FormatError("checkpoint '" + path + "' failed its checksum (corrupt or truncated)");
  }

  Checkpoint ckpt;
  ckpt.manifest = parse_manifest(r.text(), path);
  if (ckpt.manifest.version != version) throw FormatError("checkpoint '" + path + "': manifest version mismatch");
  ckpt.config_text = r.text();
  if (fnv1a64(ckpt.config_text) != ckpt.manifest.config_hash) {
    throw FormatError("checkpoint '" + path + "': config hash mismatch");
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError("checkpoint '" + path + "': implausible rank for '" + a.name + "'");
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      a.dims.push_back(r.get<std::uint64_t>());
      n *= a.dims.back();
    }
    if (n * 4 > r.remaining()) throw FormatError("checkpoint '" + path + "' is truncated");
    a.data.resize(static_cast<std::size_t>(n));
    for (auto& v : a.data) v = std::bit_cast<float>(r.get<std::uint32_t>());
    ckpt.arrays.push_back(std::move(a));
  }
  if (r.remaining() != 8) throw FormatError("checkpoint '" + path + "' has trailing bytes");
  return ckpt;
}

}  // namespace seqjepa
