#include "dal/config.hpp"
#include "dal/errors.hpp"

#include <doctest.h>

#include <string>

using namespace dal;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("round trip through JSON") {
  RunConfig c;
  c.model.layers = 3;
  c.model.mode = Mode::joint;
  c.model.ablations.p2c = false;
  c.data.corpus = "/tmp/x.txt";
  c.trainer.seed = 99;
  c.sift.enabled = true;
  const Json j = c;
  const RunConfig back = j.get<RunConfig>();
  CHECK(canonical_json(Json(back)) == canonical_json(j));
  CHECK(back.model.mode == Mode::joint);
  CHECK_FALSE(back.model.ablations.p2c);
}

TEST_CASE("canonical text has sorted keys and no spaces") {
  const Json j = Json::parse(R"({"b": 1, "a": {"d": 2, "c": 3}})");
  CHECK(canonical_json(j) == R"({"a":{"c":3,"d":2},"b":1})");
}

TEST_CASE("missing keys keep their defaults") {
  const RunConfig c = Json::parse(R"({"model": {"hidden": 32}})").get<RunConfig>();
  CHECK(c.model.hidden == 32);
  CHECK(c.model.layers == ModelConfig{}.layers);
  CHECK(c.trainer.adam_eps == 1e-6);
  CHECK(c.trainer.grad_clip == 1.0);
}

TEST_CASE("unknown keys and wrong types name the field") {
  CHECK(error_of([] { Json::parse(R"({"model": {"hiden": 3}})").get<RunConfig>(); }).find("model.hiden") !=
        std::string::npos);
  CHECK(error_of([] { Json::parse(R"({"trainer": {"steps": "many"}})").get<RunConfig>(); }).find("trainer.steps") !=
        std::string::npos);
  CHECK(error_of([] { Json::parse(R"({"model": {"mode": "xlnet"}})").get<RunConfig>(); }).find("model.mode") !=
        std::string::npos);
}

TEST_CASE("validation names the offending key") {
  RunConfig c;
  c.model.heads = 5;
  CHECK(error_of([&] { validate(c); }).find("model.heads") != std::string::npos);
  c = RunConfig{};
  c.trainer.warmup_steps = c.trainer.steps + 1;
  CHECK(error_of([&] { validate(c); }).find("trainer.warmup_steps") != std::string::npos);
  c = RunConfig{};
  c.data.seq_len = c.model.max_len + 1;
  CHECK(error_of([&] { validate(c); }).find("data.seq_len") != std::string::npos);
  c = RunConfig{};
  c.sift.epsilon = 0.0;
  CHECK(error_of([&] { validate(c); }).find("sift.epsilon") != std::string::npos);
  CHECK_NOTHROW(validate(RunConfig{}));
}

TEST_CASE("overrides are applied in order, last wins") {
  Json doc = Json::object();
  apply_override(doc, "model.ablations.c2p=false");
  apply_override(doc, "trainer.steps=10");
  apply_override(doc, "trainer.steps=12");
  apply_override(doc, "data.corpus=some/file.txt");
  apply_override(doc, "model.mode=arlm");
  const RunConfig c = doc.get<RunConfig>();
  CHECK_FALSE(c.model.ablations.c2p);
  CHECK(c.trainer.steps == 12);
  CHECK(c.data.corpus == "some/file.txt");
  CHECK(c.model.mode == Mode::arlm);
  CHECK_THROWS_AS(apply_override(doc, "novalue"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "a..b=1"), ConfigError);
}

TEST_CASE("derived sizes") {
  ModelConfig m;
  m.hidden = 64;
  m.heads = 4;
  CHECK(m.head_size() == 16);
  m.ablations.emd = false;
  CHECK(m.emd_weight_layers() == 1);
  CHECK_FALSE(m.uses_abs_pos());
  m.abs_pos_at_input = true;
  CHECK(m.uses_abs_pos());
  m.ablations.c2p = m.ablations.p2c = false;
  CHECK_FALSE(m.uses_relpos());
}
