#include "dal/checkpoint.hpp"
#include "dal/errors.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

using namespace dal;
namespace fs = std::filesystem;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.layers = 1;
  c.hidden = 8;
  c.heads = 2;
  c.ffn_size = 8;
  c.k = 2;
  c.vocab_size = 12;
  c.max_len = 8;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void spit(const fs::path& p, const std::string& bytes) { std::ofstream(p, std::ios::binary) << bytes; }

struct TempDir {
  fs::path path = fs::temp_directory_path() / "dal_checkpoint_test";
  TempDir() { fs::create_directories(path); }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("save and load round trip") {
  TempDir dir;
  const Model model(small(), 3);
  const Vocab vocab(std::vector<std::string>{"a", "b", "c"});
  const fs::path path = dir.path / "m.dal";
  save_checkpoint(model, vocab, path);
  CHECK_FALSE(fs::exists(path.string() + ".tmp"));
  CHECK(slurp(path).substr(0, 4) == "DAL1");

  const Checkpoint ck = read_checkpoint(path);
  CHECK(Json(ck.config) == Json(model.config()));
  CHECK(ck.vocab == vocab.corpus_tokens());
  const Model back = load_model(ck);
  const auto a = model.named_parameters(), b = back.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.value() == b[i].second.value());
  }
  // Same weights, same bytes.
  save_checkpoint(back, vocab, dir.path / "again.dal");
  CHECK(slurp(path) == slurp(dir.path / "again.dal"));
}

TEST_CASE("corrupted files are rejected with specific errors") {
  TempDir dir;
  const Model model(small(), 4);
  const fs::path path = dir.path / "m.dal";
  save_checkpoint(model, Vocab(), path);
  const std::string bytes = slurp(path);

  spit(dir.path / "magic.dal", "XYZ1" + bytes.substr(4));
  CHECK_THROWS_AS(read_checkpoint(dir.path / "magic.dal"), FormatError);
  spit(dir.path / "version.dal", "DAL2" + bytes.substr(4));
  CHECK_THROWS_AS(read_checkpoint(dir.path / "version.dal"), VersionError);
  spit(dir.path / "short.dal", bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_checkpoint(dir.path / "short.dal"), TruncatedError);
  spit(dir.path / "header.dal", bytes.substr(0, 6));
  CHECK_THROWS_AS(read_checkpoint(dir.path / "header.dal"), TruncatedError);
}

TEST_CASE("shape mismatch names the tensor") {
  TempDir dir;
  const Model model(small(), 5);
  const fs::path path = dir.path / "m.dal";
  save_checkpoint(model, Vocab(), path);
  ModelConfig other = small();
  other.ffn_size = 16;
  Model target(other, 5);
  try {
    load_parameters(target, read_checkpoint(path));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("ffn.w_in") != std::string::npos);
  }
}

TEST_CASE("a failed write keeps the previous checkpoint") {
  TempDir dir;
  const Model model(small(), 6);
  const fs::path path = dir.path / "m.dal";
  save_checkpoint(model, Vocab(), path);
  const std::string before = slurp(path);
  fs::create_directories(path.string() + ".tmp");  // blocks the temporary file
  CHECK_THROWS(save_checkpoint(model, Vocab(), path));
  CHECK(slurp(path) == before);
}
