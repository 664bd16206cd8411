// SPDX-License-Identifier: Apache-2.0
#include "cellprompt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>

#include <zlib.h>

#include "cellprompt/errors.hpp"

namespace cellprompt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const CheckpointTensor& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

namespace {

class Writer {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

void write_tensor(Writer& w, const std::string& name, bool trainable, const Tensor& t) {
  if (name.size() > 0xFFFF) throw FormatError("tensor name too long: " + name.substr(0, 40) + "...");
  if (t.ndim() > 0xFF) throw FormatError("tensor rank too large: " + name);
  w.put(static_cast<std::uint16_t>(name.size()));
  w.put_bytes(name.data(), name.size());
  w.put(std::uint8_t{0});
  w.put(static_cast<std::uint8_t>(trainable ? 1 : 0));
  w.put(static_cast<std::uint8_t>(t.ndim()));
  for (std::size_t d : t.shape()) {
    if (d > 0xFFFFFFFFu) throw FormatError("tensor dimension too large: " + name);
    w.put(static_cast<std::uint32_t>(d));
  }
  w.put_bytes(t.ptr(), t.size() * sizeof(double));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b, std::size_t end) : bytes_(b), end_(end) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void get_bytes(void* out, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  [[noreturn]] void fail(const std::string& what) const { fail_at(pos_, what); }
  [[noreturn]] static void fail_at(std::size_t offset, const std::string& what) {
    throw FormatError("checkpoint: " + what + " at offset " + std::to_string(offset));
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (n > end_ - pos_) fail(std::string("truncated ") + what);
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

Tensor string_tensor(const std::string& s) {
  // An empty string is stored as the single element -1.
  if (s.empty()) return Tensor({1}, {-1.0});
  Tensor t({s.size()});
  for (std::size_t i = 0; i < s.size(); ++i) t[i] = static_cast<unsigned char>(s[i]);
  return t;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.tensors.empty()) throw FormatError("checkpoint: refusing to write an empty tensor table");
  Writer w;
  w.put_bytes("SACK", 4);
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint32_t>(ckpt.tensors.size() + 4));
  for (const CheckpointTensor& t : ckpt.tensors) {
    if (t.name.rfind("meta.", 0) == 0) throw FormatError("checkpoint: reserved tensor name " + t.name);
    write_tensor(w, t.name, t.trainable, t.value);
  }
  write_tensor(w, "meta.config", false, string_tensor(ckpt.config_json));
  write_tensor(w, "meta.epoch", false, Tensor::scalar(static_cast<double>(ckpt.epoch)));
  write_tensor(w, "meta.best_val_dice", false, Tensor::scalar(ckpt.best_val_dice));
  write_tensor(w, "meta.seed", false,
               Tensor({2}, {static_cast<double>(ckpt.seed & 0xFFFFFFFFu), static_cast<double>(ckpt.seed >> 32)}));
  const uLong crc = crc32(crc32(0L, Z_NULL, 0), w.bytes.data(), static_cast<uInt>(w.bytes.size()));
  w.put(static_cast<std::uint32_t>(crc));
  return std::move(w.bytes);
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  constexpr std::size_t kHeader = 12;
  if (bytes.size() < kHeader + 4) Reader::fail_at(bytes.size(), "file too short");
  const std::size_t body = bytes.size() - 4;
  Reader r(bytes, body);
  char magic[4];
  r.get_bytes(magic, 4, "magic");
  if (std::memcmp(magic, "SACK", 4) != 0) Reader::fail_at(0, "bad magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    Reader::fail_at(4, "unsupported version " + std::to_string(version));
  }
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + body, 4);
  const uLong crc = crc32(crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(body));
  if (static_cast<std::uint32_t>(crc) != stored_crc) Reader::fail_at(body, "CRC mismatch");

  const auto count = r.get<std::uint32_t>("tensor count");
  if (count == 0) Reader::fail_at(8, "empty tensor table");
  Checkpoint ck;
  std::map<std::string, int> seen;
  bool have_config = false, have_epoch = false, have_dice = false, have_seed = false;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = r.pos();
    const auto len = r.get<std::uint16_t>("name length");
    std::string name(len, '\0');
    r.get_bytes(name.data(), len, "name");
    if (name.empty()) Reader::fail_at(start, "empty tensor name");
    if (seen[name]++) Reader::fail_at(start, "duplicate tensor " + name);
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != 0) Reader::fail_at(r.pos() - 1, "unsupported dtype " + std::to_string(dtype));
    const auto trainable = r.get<std::uint8_t>("trainable flag");
    if (trainable > 1) Reader::fail_at(r.pos() - 1, "invalid trainable flag");
    const auto ndim = r.get<std::uint8_t>("ndim");
    if (ndim == 0) Reader::fail_at(r.pos() - 1, "zero-rank tensor " + name);
    Shape shape;
    std::size_t numel = 1;
    for (std::uint8_t k = 0; k < ndim; ++k) {
      const auto d = r.get<std::uint32_t>("dimension");
      if (d == 0) Reader::fail_at(r.pos() - 4, "zero dimension in " + name);
      if (numel > (body / sizeof(double)) / d) Reader::fail_at(r.pos() - 4, "tensor " + name + " exceeds file size");
      numel *= d;
      shape.push_back(d);
    }
    std::vector<double> data(numel);
    r.get_bytes(data.data(), numel * sizeof(double), "tensor data");
    Tensor t(shape, std::move(data));
    if (name.rfind("meta.", 0) == 0) {
      if (name == "meta.config") {
        have_config = true;
        if (!(t.size() == 1 && t[0] == -1.0)) {
          for (double v : t.data()) {
            if (!(v >= 0 && v <= 255) || v != static_cast<double>(static_cast<int>(v))) {
              Reader::fail_at(start, "meta.config is not a byte string");
            }
            ck.config_json.push_back(static_cast<char>(static_cast<unsigned char>(v)));
          }
        }
      } else if (name == "meta.epoch") {
        have_epoch = true;
        ck.epoch = static_cast<std::uint64_t>(t[0]);
      } else if (name == "meta.best_val_dice") {
        have_dice = true;
        ck.best_val_dice = t[0];
      } else if (name == "meta.seed") {
        if (t.size() != 2) Reader::fail_at(start, "meta.seed must have two elements");
        have_seed = true;
        ck.seed = static_cast<std::uint64_t>(t[0]) | (static_cast<std::uint64_t>(t[1]) << 32);
      } else {
        Reader::fail_at(start, "unknown metadata tensor " + name);
      }
      continue;
    }
    ck.tensors.push_back({std::move(name), trainable == 1, std::move(t)});
  }
  if (r.pos() != body) Reader::fail_at(r.pos(), "trailing bytes before CRC");
  if (!(have_config && have_epoch && have_dice && have_seed)) Reader::fail_at(body, "missing metadata tensors");
  if (ck.tensors.empty()) Reader::fail_at(8, "empty tensor table");
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const std::vector<std::uint8_t> bytes = serialize_checkpoint(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("cannot write checkpoint " + path);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

std::vector<CheckpointTensor> capture_params(const NamedParams& params) {
  std::vector<CheckpointTensor> out;
  out.reserve(params.size());
  for (const auto& [name, p] : params) out.push_back({name, p->trainable, p->value});
  return out;
}

void restore_params(const NamedParams& params, const std::vector<CheckpointTensor>& tensors) {
  if (params.size() != tensors.size()) {
    throw FormatError("checkpoint has " + std::to_string(tensors.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  std::map<std::string, const CheckpointTensor*> by_name;
  for (const CheckpointTensor& t : tensors) by_name[t.name] = &t;
  for (const auto& [name, p] : params) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor " + name);
    if (it->second->value.shape() != p->value.shape()) {
      throw FormatError("checkpoint tensor " + name + " has shape " + shape_str(it->second->value.shape()) +
                        ", model expects " + shape_str(p->value.shape()));
    }
  }
  for (const auto& [name, p] : params) {
    const CheckpointTensor& t = *by_name.at(name);
    p->value = t.value;
    p->trainable = t.trainable;
    p->zero_grad();
  }
}

}  // namespace cellprompt
