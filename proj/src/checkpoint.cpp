#include "dal/checkpoint.hpp"

#include "dal/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace dal {

namespace {

constexpr char kMagic[4] = {'D', 'A', 'L', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  out.append(bytes, sizeof(T));
}

class Cursor {
 public:
  Cursor(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  bool done() const { return at_ == bytes_.size(); }

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + at_, sizeof(T));
    at_ += sizeof(T);
    return v;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(at_, n);
    at_ += n;
    return s;
  }

  void read_doubles(double* dst, std::size_t n, const std::string& what) {
    if (n > (bytes_.size() - at_) / sizeof(double)) {
      throw TruncatedError(path_ + ": truncated inside tensor " + what);
    }
    std::memcpy(dst, bytes_.data() + at_, n * sizeof(double));
    at_ += n * sizeof(double);
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (n > bytes_.size() - at_) throw TruncatedError(path_ + ": truncated while reading " + what);
  }

  const std::string& bytes_;
  std::string path_;
  std::size_t at_ = 0;
};

}  // namespace

void save_checkpoint(const Model& model, const Vocab& vocab, const std::filesystem::path& path) {
  Json meta{{"model", model.config()}, {"vocab", vocab.corpus_tokens()}};
  const std::string text = canonical_json(meta);
  std::string out(kMagic, 4);
  put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& [name, tensor] : model.named_parameters()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, 2);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(tensor.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(tensor.cols()));
    out.append(reinterpret_cast<const char*>(tensor.value().data()),
               static_cast<std::size_t>(tensor.size()) * sizeof(double));
  }
  // Write-then-rename keeps the previous checkpoint intact on failure.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw InputError("cannot write checkpoint " + tmp.string());
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!os) throw InputError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot read checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  Cursor cur(bytes, path.string());

  const std::string magic = cur.take(4, "magic");
  if (magic.compare(0, 3, kMagic, 3) != 0) throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  if (magic[3] != kMagic[3]) {
    throw VersionError(path.string() + ": unsupported checkpoint version '" + std::string(1, magic[3]) + "'");
  }

  const auto meta_len = cur.get<std::uint64_t>("metadata length");
  const std::string meta_text = cur.take(static_cast<std::size_t>(meta_len), "metadata");
  const Json meta = Json::parse(meta_text, nullptr, false);
  if (meta.is_discarded() || !meta.is_object() || !meta.contains("model")) {
    throw FormatError(path.string() + ": malformed metadata");
  }
  Checkpoint ck;
  try {
    ck.config = meta.at("model").get<ModelConfig>();
    ck.vocab = meta.value("vocab", std::vector<std::string>{});
  } catch (const Json::exception& e) {
    throw FormatError(path.string() + ": malformed metadata: " + e.what());
  }

  while (!cur.done()) {
    const auto name_len = cur.get<std::uint32_t>("tensor name length");
    std::string name = cur.take(name_len, "tensor name");
    const auto rank = cur.get<std::uint32_t>("tensor rank");
    if (rank > 2) throw FormatError(path.string() + ": tensor " + name + " has rank " + std::to_string(rank));
    std::uint64_t extents[2] = {1, 1};
    for (std::uint32_t r = 0; r < rank; ++r) extents[2 - rank + r] = cur.get<std::uint64_t>("tensor extent");
    Matrix m(static_cast<Index>(extents[0]), static_cast<Index>(extents[1]));
    cur.read_doubles(m.data(), static_cast<std::size_t>(m.size()), name);
    ck.tensors.emplace_back(std::move(name), std::move(m));
  }
  return ck;
}

void load_parameters(Model& model, const Checkpoint& checkpoint) {
  std::map<std::string, const Matrix*> stored;
  for (const auto& [name, m] : checkpoint.tensors) stored[name] = &m;
  auto params = model.named_parameters();
  for (auto& [name, tensor] : params) {
    auto it = stored.find(name);
    if (it == stored.end()) throw ShapeError("checkpoint has no tensor " + name);
    const Matrix& m = *it->second;
    if (m.rows() != tensor.rows() || m.cols() != tensor.cols()) {
      throw ShapeError("tensor " + name + ": checkpoint " + shape_string(m.rows(), m.cols()) + " vs model " +
                       shape_string(tensor.rows(), tensor.cols()));
    }
  }
  if (stored.size() != params.size()) {
    for (const auto& [name, m] : stored) {
      bool known = false;
      for (const auto& p : params) known = known || p.first == name;
      if (!known) throw ShapeError("checkpoint tensor " + name + " has no counterpart in the model");
    }
  }
  for (auto& [name, tensor] : params) {
    tensor.mutable_value() = *stored.at(name);
    tensor.zero_grad();
  }
}

Model load_model(const Checkpoint& checkpoint) {
  Model model(checkpoint.config, 0);
  load_parameters(model, checkpoint);
  return model;
}

}  // namespace dal
