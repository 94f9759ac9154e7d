#include "dal/config.hpp"

#include "dal/errors.hpp"

#include <set>

namespace dal {

namespace {

// Reads known keys from an object, rejecting anything it does not recognize.
class Reader {
 public:
  Reader(const Json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j.is_object()) throw ConfigError(section_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const Json::exception&) {
      throw ConfigError(section_ + "." + key + ": wrong type " + it->dump());
    }
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(section_ + "." + key + ": unknown key");
    }
  }

 private:
  const Json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key + ": " + what);
}

}  // namespace

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::mlm:
      return "mlm";
    case Mode::arlm:
      return "arlm";
    case Mode::joint:
      return "joint";
  }
  return "mlm";
}

Mode parse_mode(const std::string& text) {
  if (text == "mlm") return Mode::mlm;
  if (text == "arlm") return Mode::arlm;
  if (text == "joint") return Mode::joint;
  throw ConfigError("model.mode: expected mlm, arlm or joint, got \"" + text + "\"");
}

void to_json(Json& j, const ModelConfig& c) {
  j = Json{{"layers", c.layers},
           {"hidden", c.hidden},
           {"heads", c.heads},
           {"ffn_size", c.ffn_size},
           {"k", c.k},
           {"vocab_size", c.vocab_size},
           {"n_emd", c.n_emd},
           {"emd_shared", c.emd_shared},
           {"mode", to_string(c.mode)},
           {"ablations", {{"emd", c.ablations.emd}, {"c2p", c.ablations.c2p}, {"p2c", c.ablations.p2c}}},
           {"share_projection", c.share_projection},
           {"abs_pos_at_input", c.abs_pos_at_input},
           {"dropout", c.dropout},
           {"max_len", c.max_len},
           {"init_std", c.init_std},
           {"layer_norm_eps", c.layer_norm_eps}};
}

void from_json(const Json& j, ModelConfig& c) {
  Reader r(j, "model");
  r.get("layers", c.layers);
  r.get("hidden", c.hidden);
  r.get("heads", c.heads);
  r.get("ffn_size", c.ffn_size);
  r.get("k", c.k);
  r.get("vocab_size", c.vocab_size);
  r.get("n_emd", c.n_emd);
  r.get("emd_shared", c.emd_shared);
  std::string mode = to_string(c.mode);
  r.get("mode", mode);
  c.mode = parse_mode(mode);
  if (const Json* ab = r.child("ablations")) {
    Reader a(*ab, "model.ablations");
    a.get("emd", c.ablations.emd);
    a.get("c2p", c.ablations.c2p);
    a.get("p2c", c.ablations.p2c);
    a.finish();
  }
  r.get("share_projection", c.share_projection);
  r.get("abs_pos_at_input", c.abs_pos_at_input);
  r.get("dropout", c.dropout);
  r.get("max_len", c.max_len);
  r.get("init_std", c.init_std);
  r.get("layer_norm_eps", c.layer_norm_eps);
  r.finish();
}

void to_json(Json& j, const DataConfig& c) {
  j = Json{{"corpus", c.corpus},
           {"eval_corpus", c.eval_corpus},
           {"seq_len", c.seq_len},
           {"mask_rate", c.mask_rate},
           {"span_max", c.span_max}};
}

void from_json(const Json& j, DataConfig& c) {
  Reader r(j, "data");
  r.get("corpus", c.corpus);
  r.get("eval_corpus", c.eval_corpus);
  r.get("seq_len", c.seq_len);
  r.get("mask_rate", c.mask_rate);
  r.get("span_max", c.span_max);
  r.finish();
}

void to_json(Json& j, const TrainConfig& c) {
  j = Json{{"steps", c.steps},
           {"batch_size", c.batch_size},
           {"peak_lr", c.peak_lr},
           {"warmup_steps", c.warmup_steps},
           {"weight_decay", c.weight_decay},
           {"adam_beta1", c.adam_beta1},
           {"adam_beta2", c.adam_beta2},
           {"adam_eps", c.adam_eps},
           {"grad_clip", c.grad_clip},
           {"checkpoint_every", c.checkpoint_every},
           {"seed", c.seed}};
}

void from_json(const Json& j, TrainConfig& c) {
  Reader r(j, "trainer");
  r.get("steps", c.steps);
  r.get("batch_size", c.batch_size);
  r.get("peak_lr", c.peak_lr);
  r.get("warmup_steps", c.warmup_steps);
  r.get("weight_decay", c.weight_decay);
  r.get("adam_beta1", c.adam_beta1);
  r.get("adam_beta2", c.adam_beta2);
  r.get("adam_eps", c.adam_eps);
  r.get("grad_clip", c.grad_clip);
  r.get("checkpoint_every", c.checkpoint_every);
  r.get("seed", c.seed);
  r.finish();
}

void to_json(Json& j, const SiftConfig& c) {
  j = Json{{"enabled", c.enabled},
           {"epsilon", c.epsilon},
           {"ascent_steps", c.ascent_steps},
           {"ascent_lr", c.ascent_lr},
           {"lambda", c.lambda}};
}

void from_json(const Json& j, SiftConfig& c) {
  Reader r(j, "sift");
  r.get("enabled", c.enabled);
  r.get("epsilon", c.epsilon);
  r.get("ascent_steps", c.ascent_steps);
  r.get("ascent_lr", c.ascent_lr);
  r.get("lambda", c.lambda);
  r.finish();
}

void to_json(Json& j, const RunConfig& c) {
  j = Json{{"model", c.model}, {"data", c.data}, {"trainer", c.trainer}, {"sift", c.sift}};
}

void from_json(const Json& j, RunConfig& c) {
  Reader r(j, "config");
  if (const Json* m = r.child("model")) from_json(*m, c.model);
  if (const Json* d = r.child("data")) from_json(*d, c.data);
  if (const Json* t = r.child("trainer")) from_json(*t, c.trainer);
  if (const Json* s = r.child("sift")) from_json(*s, c.sift);
  r.finish();
}

void validate(const ModelConfig& c) {
  require(c.layers >= 0, "model.layers", "must be >= 0");
  require(c.hidden >= 2, "model.hidden", "must be >= 2");
  require(c.heads >= 1, "model.heads", "must be >= 1");
  require(c.hidden % c.heads == 0, "model.heads", "must divide model.hidden");
  require(c.ffn_size >= 1, "model.ffn_size", "must be >= 1");
  require(c.k >= 1, "model.k", "must be >= 1");
  require(c.vocab_size > 5, "model.vocab_size", "must exceed the 5 reserved ids");
  require(c.n_emd >= 1, "model.n_emd", "must be >= 1");
  require(c.dropout >= 0.0 && c.dropout < 1.0, "model.dropout", "must be in [0, 1)");
  require(c.max_len >= 1, "model.max_len", "must be >= 1");
  require(c.init_std > 0.0, "model.init_std", "must be positive");
  require(c.layer_norm_eps > 0.0, "model.layer_norm_eps", "must be positive");
}

void validate(const TrainConfig& c) {
  require(c.steps >= 1, "trainer.steps", "must be >= 1");
  require(c.batch_size >= 1, "trainer.batch_size", "must be >= 1");
  require(c.peak_lr > 0.0, "trainer.peak_lr", "must be positive");
  require(c.warmup_steps >= 0 && c.warmup_steps <= c.steps, "trainer.warmup_steps", "must be in [0, steps]");
  require(c.weight_decay >= 0.0, "trainer.weight_decay", "must be >= 0");
  require(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0, "trainer.adam_beta1", "must be in [0, 1)");
  require(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0, "trainer.adam_beta2", "must be in [0, 1)");
  require(c.adam_eps > 0.0, "trainer.adam_eps", "must be positive");
  require(c.grad_clip > 0.0, "trainer.grad_clip", "must be positive");
  require(c.checkpoint_every >= 1, "trainer.checkpoint_every", "must be >= 1");
}

void validate(const SiftConfig& c) {
  require(c.epsilon > 0.0, "sift.epsilon", "must be positive");
  require(c.ascent_steps >= 1, "sift.ascent_steps", "must be >= 1");
  require(c.ascent_lr > 0.0, "sift.ascent_lr", "must be positive");
  require(c.lambda >= 0.0, "sift.lambda", "must be >= 0");
}

void validate(const RunConfig& c) {
  validate(c.model);
  validate(c.trainer);
  validate(c.sift);
  require(c.data.seq_len >= 3, "data.seq_len", "must be >= 3");
  require(c.data.seq_len <= c.model.max_len, "data.seq_len", "must not exceed model.max_len");
  require(c.data.mask_rate > 0.0 && c.data.mask_rate <= 1.0, "data.mask_rate", "must be in (0, 1]");
  require(c.data.span_max >= 1, "data.span_max", "must be >= 1");
}

void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override \"" + assignment + "\": expected key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  Json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override \"" + assignment + "\": empty path component");
    if (!node->is_object()) *node = Json::object();
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

std::string canonical_json(const Json& doc) { return doc.dump(); }

}  // namespace dal
