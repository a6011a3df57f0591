#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cdvgm/errors.hpp"
#include "cdvgm/kv.hpp"
#include "cdvgm/model.hpp"

// Layout (all integers little-endian):
//   "CDVGMCKP" u16 version
//   u32 len, model config text (key = value lines)
//   u32 len, metadata text
//   u32 len, generator state text
//   u32 blob count, then per blob:
//     u8 kind (0 parameter, 1 buffer), u32 name len, name,
//     u32 rank, u64 dims[rank], f64 values[prod(dims)]
namespace cdvgm::model {

namespace {

constexpr char kMagic[8] = {'C', 'D', 'V', 'G', 'M', 'C', 'K', 'P'};
constexpr std::uint16_t kVersion = 1;

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const std::string& s) { buf_.append(s); }
  void text(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  const std::string& buffer() const { return buf_; }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get_le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
  std::uint64_t u64() { return get_le(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string text() { return bytes(u32()); }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw DataError("checkpoint " + path_ + ": truncated at byte " + std::to_string(pos_) + " (needed " +
                      std::to_string(n) + " more, file has " + std::to_string(data_.size()) + ")");
    }
  }
  std::uint64_t get_le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, CdvgmModel& model, const std::map<std::string, std::string>& metadata,
                     const std::string& rng_state) {
  Writer w;
  w.bytes(std::string(kMagic, sizeof(kMagic)));
  w.u16(kVersion);
  w.text(kv::serialize(model.config().to_kv()));
  w.text(kv::serialize(metadata));
  w.text(rng_state);
  const auto params = model.parameters();
  const auto bufs = model.buffers();
  w.u32(static_cast<std::uint32_t>(params.size() + bufs.size()));
  for (const auto& p : params) {
    w.u8(0);
    w.text(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) w.u64(d);
    for (double v : p.tensor.data()) w.f64(v);
  }
  for (const auto& [name, values] : bufs) {
    w.u8(1);
    w.text(name);
    w.u32(1);
    w.u64(values->size());
    for (double v : *values) w.f64(v);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot open '" + path + "' for writing");
  out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!out) throw DataError("checkpoint: write to '" + path + "' failed");
}

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(data), path);
  if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw DataError("checkpoint " + path + ": bad magic bytes");
  }
  if (const auto v = r.u16(); v != kVersion) {
    throw DataError("checkpoint " + path + ": unsupported version " + std::to_string(v));
  }
  CheckpointData ckpt;
  try {
    ckpt.config = ModelConfig::from_kv(kv::parse(r.text(), path + " [config]"));
    ckpt.metadata = kv::parse(r.text(), path + " [metadata]");
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  ckpt.rng_state = r.text();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto kind = r.u8();
    auto name = r.text();
    const auto rank = r.u32();
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::size_t>(r.u64()));
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = r.f64();
    if (kind == 0) {
      ckpt.params.emplace_back(std::move(name), Tensor::from(shape, std::move(values)));
    } else if (kind == 1) {
      ckpt.buffers.emplace_back(std::move(name), std::move(values));
    } else {
      throw DataError("checkpoint " + path + ": unknown blob kind " + std::to_string(kind));
    }
  }
  if (!r.done()) throw DataError("checkpoint " + path + ": trailing bytes after last blob");
  return ckpt;
}

CdvgmModel model_from_checkpoint(const CheckpointData& ckpt) {
  CdvgmModel model(ckpt.config, 0);
  auto params = model.parameters();
  if (params.size() != ckpt.params.size()) {
    throw DataError("checkpoint holds " + std::to_string(ckpt.params.size()) + " parameters, model expects " +
                    std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = ckpt.params[i];
    if (name != params[i].name || t.shape() != params[i].tensor.shape()) {
      throw DataError("checkpoint parameter '" + name + "' " + shape_str(t.shape()) + " does not match model slot '" +
                      params[i].name + "' " + shape_str(params[i].tensor.shape()));
    }
    const auto src = t.data();
    std::copy(src.begin(), src.end(), params[i].tensor.mutable_data().begin());
  }
  auto bufs = model.buffers();
  if (bufs.size() != ckpt.buffers.size()) throw DataError("checkpoint buffer count does not match the model");
  for (std::size_t i = 0; i < bufs.size(); ++i) {
    if (bufs[i].first != ckpt.buffers[i].first || bufs[i].second->size() != ckpt.buffers[i].second.size()) {
      throw DataError("checkpoint buffer '" + ckpt.buffers[i].first + "' does not match model slot '" +
                      bufs[i].first + "'");
    }
    *bufs[i].second = ckpt.buffers[i].second;
  }
  return model;
}

}  // namespace cdvgm::model
