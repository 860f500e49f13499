#include "m2m/nn/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "m2m/core/error.hpp"

namespace m2m::nn {

namespace {

constexpr char kMagic[4] = {'M', '2', 'M', 'C'};

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_string16(std::vector<std::uint8_t>& out, const std::string& s) {
  if (s.size() > 0xffff) throw ContractError("checkpoint string too long");
  put<std::uint16_t>(out, static_cast<std::uint16_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

class Cursor {
 public:
  explicit Cursor(std::span<const std::uint8_t> b) : b_(b) {}
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(b_.begin() + static_cast<std::ptrdiff_t>(pos_), b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw ParseError("truncated checkpoint", pos_);
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint16_t>(out, kCheckpointVersion);
  put_string16(out, ckpt.kind);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.config.size()));
  out.insert(out.end(), ckpt.config.begin(), ckpt.config.end());
  put<std::uint8_t>(out, ckpt.trained ? 1 : 0);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (t.values.size() != numel(t.shape)) throw ContractError("checkpoint tensor " + t.name + ": size mismatch");
    put_string16(out, t.name);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    for (int d : t.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float f : t.values) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Cursor c(bytes);
  if (c.str(4) != std::string(kMagic, 4)) throw ParseError("bad checkpoint magic", 0);
  const auto version = c.get<std::uint16_t>();
  if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  Checkpoint ck;
  ck.kind = c.str(c.get<std::uint16_t>());
  ck.config = c.str(c.get<std::uint32_t>());
  ck.trained = (c.get<std::uint8_t>() & 1) != 0;
  const auto count = c.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = c.str(c.get<std::uint16_t>());
    const int rank = c.get<std::uint8_t>();
    for (int r = 0; r < rank; ++r) t.shape.push_back(static_cast<int>(c.get<std::uint32_t>()));
    const std::size_t n = numel(t.shape);
    if (n > bytes.size()) throw ParseError("tensor " + t.name + " larger than file", c.pos());
    t.values.resize(n);
    for (auto& f : t.values) f = std::bit_cast<float>(c.get<std::uint32_t>());
    ck.tensors.push_back(std::move(t));
  }
  if (!c.done()) throw ParseError("trailing bytes in checkpoint", c.pos());
  return ck;
}

void write_checkpoint_file(const Checkpoint& ckpt, const std::string& path) {
  const auto bytes = encode_checkpoint(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

std::vector<StoredTensor> snapshot(const ParameterStore<float>& store) {
  std::vector<StoredTensor> out;
  for (const auto& p : store.entries()) {
    auto d = p.tensor.data();
    out.push_back({p.name, p.tensor.shape(), std::vector<float>(d.begin(), d.end())});
  }
  return out;
}

void restore(ParameterStore<float>& store, const std::vector<StoredTensor>& tensors) {
  const auto& entries = store.entries();
  if (entries.size() != tensors.size()) {
    throw ContractError("checkpoint has " + std::to_string(tensors.size()) + " tensors, model expects " +
                        std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& src = tensors[i];
    Tensor<float> dst = entries[i].tensor;
    if (src.name != entries[i].name || src.shape != dst.shape()) {
      throw ContractError("checkpoint tensor " + src.name + " " + shape_string(src.shape) + " does not match " +
                          entries[i].name + " " + shape_string(dst.shape()));
    }
    std::copy(src.values.begin(), src.values.end(), dst.data().begin());
  }
}

}  // namespace m2m::nn
