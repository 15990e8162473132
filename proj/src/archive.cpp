#include "tpf/archive.hpp"

#include "tpf/common.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace tpf {

namespace {

constexpr char kMagic[8] = {'T', 'P', 'F', 'N', 'A', 'R', 'C', '1'};

enum class DType : uint8_t { F32 = 0, I64 = 1, U8 = 2, F64 = 3 };

DType dtype_tag(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return DType::F32;
    case torch::kInt64: return DType::I64;
    case torch::kUInt8: return DType::U8;
    case torch::kFloat64: return DType::F64;
    default: throw IoError(std::string("archive: unsupported dtype ") + c10::toString(t));
  }
}

torch::ScalarType scalar_type(DType t) {
  switch (t) {
    case DType::F32: return torch::kFloat32;
    case DType::I64: return torch::kInt64;
    case DType::U8: return torch::kUInt8;
    case DType::F64: return torch::kFloat64;
  }
  throw IoError("archive: unknown dtype tag");
}

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_integral_v<T>);
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

void put_str(std::string& out, const std::string& s) {
  put_le<uint32_t>(out, static_cast<uint32_t>(s.size()));
  out.append(s);
}

void put_raw(std::string& out, const torch::Tensor& t) {
  const auto* bytes = static_cast<const char*>(t.data_ptr());
  const size_t n = t.numel() * t.element_size();
  if constexpr (std::endian::native == std::endian::little) {
    out.append(bytes, n);
  } else {
    const size_t w = t.element_size();
    for (size_t i = 0; i < n; i += w)
      for (size_t b = 0; b < w; ++b) out.push_back(bytes[i + w - 1 - b]);
  }
}

class Reader {
 public:
  explicit Reader(const std::string& data) : data_(data) {}

  template <typename T>
  T le() {
    need(sizeof(T));
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (size_t i = 0; i < sizeof(T); ++i)
      u |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }

  std::string str() {
    auto n = le<uint32_t>();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void raw(void* dst, size_t n, size_t width) {
    need(n);
    auto* out = static_cast<char*>(dst);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out, data_.data() + pos_, n);
    } else {
      for (size_t i = 0; i < n; i += width)
        for (size_t b = 0; b < width; ++b) out[i + b] = data_[pos_ + i + width - 1 - b];
    }
    pos_ += n;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(size_t n) const {
    if (pos_ + n > data_.size()) throw IoError("archive: truncated data");
  }
  const std::string& data_;
  size_t pos_ = 0;
};

}  // namespace

void Archive::set_meta(const std::string& key, std::string value) { meta_[key] = std::move(value); }

const std::string& Archive::meta(const std::string& key) const {
  auto it = meta_.find(key);
  if (it == meta_.end()) throw IncompatibleError("archive: missing metadata '" + key + "'");
  return it->second;
}

bool Archive::has_meta(const std::string& key) const { return meta_.count(key) != 0; }

void Archive::put(const std::string& name, const torch::Tensor& t) {
  dtype_tag(t.scalar_type());
  auto copy = t.detach().to(torch::kCPU).contiguous().clone();
  if (!tensors_.count(name)) order_.push_back(name);
  tensors_[name] = std::move(copy);
}

const torch::Tensor& Archive::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw IncompatibleError("archive: missing entry '" + name + "'");
  return it->second;
}

bool Archive::contains(const std::string& name) const { return tensors_.count(name) != 0; }

std::string Archive::to_bytes() const {
  std::string out(kMagic, sizeof(kMagic));
  put_le<uint32_t>(out, static_cast<uint32_t>(meta_.size()));
  for (const auto& [k, v] : meta_) {
    put_str(out, k);
    put_str(out, v);
  }
  put_le<uint32_t>(out, static_cast<uint32_t>(order_.size()));
  for (const auto& name : order_) {
    const auto& t = tensors_.at(name);
    put_str(out, name);
    out.push_back(static_cast<char>(dtype_tag(t.scalar_type())));
    put_le<uint32_t>(out, static_cast<uint32_t>(t.dim()));
    for (auto d : t.sizes()) put_le<int64_t>(out, d);
    put_raw(out, t);
  }
  return out;
}

Archive Archive::from_bytes(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw IoError("archive: bad magic");
  Archive a;
  Reader r(bytes);
  for (size_t i = 0; i < sizeof(kMagic); ++i) r.le<uint8_t>();
  auto nmeta = r.le<uint32_t>();
  for (uint32_t i = 0; i < nmeta; ++i) {
    auto k = r.str();
    a.meta_[k] = r.str();
  }
  auto ntensors = r.le<uint32_t>();
  for (uint32_t i = 0; i < ntensors; ++i) {
    auto name = r.str();
    auto tag = static_cast<DType>(r.le<uint8_t>());
    auto rank = r.le<uint32_t>();
    if (rank > 8) throw IoError("archive: implausible rank for '" + name + "'");
    std::vector<int64_t> dims(rank);
    for (auto& d : dims) {
      d = r.le<int64_t>();
      if (d < 0) throw IoError("archive: negative extent for '" + name + "'");
    }
    auto t = torch::empty(dims, torch::TensorOptions().dtype(scalar_type(tag)));
    r.raw(t.data_ptr(), t.numel() * t.element_size(), t.element_size());
    if (a.tensors_.count(name)) throw IoError("archive: duplicate entry '" + name + "'");
    a.order_.push_back(name);
    a.tensors_[name] = t;
  }
  if (!r.done()) throw IoError("archive: trailing bytes");
  return a;
}

void Archive::save(const std::filesystem::path& path) const {
  const auto bytes = to_bytes();
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp.string() + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

Archive Archive::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: '" + path.string() + "'");
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return from_bytes(ss.str());
}

void export_module(const torch::nn::Module& module, Archive& archive, const std::string& prefix) {
  for (const auto& p : module.named_parameters(true)) archive.put(prefix + p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) archive.put(prefix + b.key(), b.value());
}

void import_module(torch::nn::Module& module, const Archive& archive, const std::string& prefix) {
  std::vector<std::pair<torch::Tensor, const torch::Tensor*>> plan;
  std::set<std::string> expected;
  auto stage = [&](const std::string& key, torch::Tensor& target) {
    const auto name = prefix + key;
    expected.insert(name);
    if (!archive.contains(name)) throw IncompatibleError("missing entry '" + name + "'");
    const auto& src = archive.get(name);
    if (src.sizes() != target.sizes())
      throw IncompatibleError("shape mismatch for '" + name + "': file " + shape_str(src.sizes()) + ", model " +
                              shape_str(target.sizes()));
    if (src.scalar_type() != target.scalar_type() &&
        !(src.is_floating_point() && target.is_floating_point()))
      throw IncompatibleError("dtype mismatch for '" + name + "'");
    plan.emplace_back(target, &src);
  };
  for (auto& p : module.named_parameters(true)) stage(p.key(), p.value());
  for (auto& b : module.named_buffers(true)) stage(b.key(), b.value());
  for (const auto& name : archive.names()) {
    if (name.rfind(prefix, 0) == 0 && !expected.count(name))
      throw IncompatibleError("unexpected entry '" + name + "'");
  }
  torch::NoGradGuard no_grad;
  for (auto& [target, src] : plan) target.copy_(*src);
}

void save_parameters(const torch::nn::Module& module, const std::filesystem::path& path) {
  Archive a;
  a.set_meta("kind", "parameters");
  export_module(module, a);
  a.save(path);
}

void load_parameters(torch::nn::Module& module, const std::filesystem::path& path) {
  auto a = Archive::load(path);
  import_module(module, a);
}

}  // namespace tpf
