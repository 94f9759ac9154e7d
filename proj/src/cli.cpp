#include "dal/cli.hpp"

#include "dal/attention.hpp"
#include "dal/checkpoint.hpp"
#include "dal/config.hpp"
#include "dal/data.hpp"
#include "dal/errors.hpp"
#include "dal/model.hpp"
#include "dal/relpos.hpp"
#include "dal/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

namespace dal {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::string out = "run";
  std::optional<std::uint64_t> seed;
  std::string fault = "none";
  std::string checkpoint;
  std::string text;
  std::string nll;
  int seeds = 100;
};

struct Run {
  RunConfig config;
  Json requested;  // the file plus overrides, before defaults
  fs::path out;
};

Json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("--config: cannot read " + path.string());
  Json doc = Json::parse(is, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("--config: " + path.string() + " is not valid JSON");
  return doc;
}

std::string resolve(const std::string& path, const fs::path& base) {
  if (path.empty()) return path;
  const fs::path p(path);
  return (p.is_absolute() ? p : fs::absolute(base / p)).lexically_normal().string();
}

// Parses the config file, applies the overrides in order, resolves corpus
// paths against the config file's directory and echoes the result.
Run load_run(const Options& o) {
  Json doc = Json::object();
  fs::path base = fs::current_path();
  if (!o.config.empty()) {
    doc = read_json_file(o.config);
    base = fs::absolute(o.config).parent_path();
  }
  for (const auto& assignment : o.overrides) apply_override(doc, assignment);
  Run run{doc.get<RunConfig>(), doc, fs::path(o.out)};
  if (o.seed) run.config.trainer.seed = *o.seed;
  run.config.data.corpus = resolve(run.config.data.corpus, base);
  run.config.data.eval_corpus = resolve(run.config.data.eval_corpus, base);
  validate(run.config);

  fs::create_directories(run.out);
  std::ofstream os(run.out / "effective_config.json");
  os << Json(run.config).dump(2) << '\n';
  if (!os) throw InputError("cannot write " + (run.out / "effective_config.json").string());
  return run;
}

std::vector<std::string> corpus_documents(const std::string& path, const char* key) {
  if (path.empty()) throw ConfigError(std::string(key) + ": no corpus path given");
  if (!fs::exists(path)) throw ConfigError(std::string(key) + ": corpus not found: " + path);
  return read_corpus(path);
}

fs::path checkpoint_path(const Options& o, const Run& run) {
  const fs::path p = o.checkpoint.empty() ? run.out / "checkpoint.dal" : fs::path(o.checkpoint);
  if (!fs::exists(p)) throw ConfigError("--checkpoint: not found: " + p.string());
  return p;
}

void compare_model_keys(const Json& requested, const Json& stored, const std::string& prefix) {
  for (const auto& [key, value] : requested.items()) {
    const std::string name = prefix + "." + key;
    if (!stored.contains(key)) throw ConfigError(name + ": not present in checkpoint");
    if (value.is_object()) {
      compare_model_keys(value, stored.at(key), name);
    } else if (stored.at(key) != value) {
      throw ConfigError(name + ": config has " + value.dump() + " but checkpoint has " + stored.at(key).dump());
    }
  }
}

// The checkpoint carries its own model config; any model key the user gave
// that disagrees with it is a usage error.
void check_matches(const Run& run, const Checkpoint& ck) {
  if (!run.requested.contains("model")) return;
  compare_model_keys(run.requested.at("model"), Json(ck.config), "model");
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

int cmd_pretrain(const Options& o, std::ostream& out) {
  const Run run = load_run(o);
  const auto docs = corpus_documents(run.config.data.corpus, "data.corpus");
  std::vector<std::string> eval_docs;
  if (!run.config.data.eval_corpus.empty()) eval_docs = corpus_documents(run.config.data.eval_corpus, "data.eval_corpus");
  const PreparedData data = prepare_data(run.config, docs, eval_docs);
  data.vocab.save(run.out / "vocab.txt");
  const BatchStream stream = make_stream(run.config, data);

  Model model(run.config.model, run.config.trainer.seed);
  std::ofstream metrics(run.out / "metrics.jsonl", std::ios::trunc);
  TrainHooks hooks;
  hooks.on_metrics = [&](const Json& record) { metrics << canonical_json(record) << '\n' << std::flush; };
  hooks.on_checkpoint = [&](std::int64_t) { save_checkpoint(model, data.vocab, run.out / "checkpoint.dal"); };
  const TrainResult result = train(model, stream, run.config.trainer, run.config.sift, hooks);

  out << "steps " << result.steps << '\n';
  if (result.final_mlm_loss) out << "mlm_loss " << format_double(*result.final_mlm_loss) << '\n';
  if (result.final_arlm_loss) out << "arlm_loss " << format_double(*result.final_arlm_loss) << '\n';
  out << "checkpoint " << (run.out / "checkpoint.dal").string() << '\n';
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const Run run = load_run(o);
  const Checkpoint ck = read_checkpoint(checkpoint_path(o, run));
  check_matches(run, ck);
  Model model = load_model(ck);
  const Vocab vocab(ck.vocab);
  const std::string& path = run.config.data.eval_corpus.empty() ? run.config.data.corpus : run.config.data.eval_corpus;
  const auto docs = corpus_documents(path, run.config.data.eval_corpus.empty() ? "data.corpus" : "data.eval_corpus");
  std::vector<std::vector<Index>> ids;
  for (const auto& doc : docs) {
    auto row = vocab.encode(doc);
    if (!row.empty()) ids.push_back(std::move(row));
  }
  const auto sequences = chunk_documents(ids, run.config.data.seq_len);
  const auto nll = evaluate_nll(model, sequences, run.config.data.seq_len, run.config.trainer.batch_size);
  double total = 0.0;
  for (double v : nll) total += v;
  out << format_double(std::exp(total / static_cast<double>(nll.size()))) << '\n';
  if (!o.nll.empty()) {
    std::ofstream os(o.nll);
    os << std::setprecision(17);
    for (double v : nll) os << v << '\n';
  }
  return kExitOk;
}

int cmd_audit(const Options& o, std::ostream& out) {
  const Run run = load_run(o);
  const ModelConfig& m = run.config.model;
  out << "total_params " << parameter_count(m) << '\n';
  out << "extra_params " << extra_param_count(m) << '\n';
  out << "emd_relative_cost " << format_double(0.15 * static_cast<double>(m.n_emd) / static_cast<double>(m.layers))
      << '\n';
  out << "max_reach " << max_reach(m.k, m.layers) << '\n';
  return kExitOk;
}

int cmd_dump_attention(const Options& o, std::ostream& out) {
  const Run run = load_run(o);
  const Checkpoint ck = read_checkpoint(checkpoint_path(o, run));
  Model model = load_model(ck);
  const Vocab vocab(ck.vocab);
  std::vector<Index> tokens = vocab.encode(o.text);
  if (tokens.empty()) throw ConfigError("--text: no tokens in input");
  tokens.insert(tokens.begin(), kClsId);
  tokens.push_back(kSepId);
  if (static_cast<std::int64_t>(tokens.size()) > model.config().max_len) {
    tokens.resize(static_cast<std::size_t>(model.config().max_len));
    tokens.back() = kSepId;
  }
  const auto patterns = model.attention_patterns(tokens);
  Json files = Json::array();
  for (std::size_t l = 0; l < patterns.size(); ++l) {
    for (std::size_t h = 0; h < patterns[l].size(); ++h) {
      const std::string name = "layer" + std::to_string(l) + "_head" + std::to_string(h) + ".csv";
      write_attention_csv(run.out / name, patterns[l][h]);
      files.push_back({{"file", name},
                       {"layer", l},
                       {"head", h},
                       {"last_layer", l + 1 == patterns.size()}});
    }
  }
  Json tokens_json = Json::array();
  for (Index t : tokens) tokens_json.push_back(vocab.token(t));
  std::ofstream manifest(run.out / "manifest.json");
  manifest << Json{{"tokens", tokens_json}, {"files", files}}.dump(2) << '\n';
  out << files.size() << " attention maps written to " << run.out.string() << '\n';
  return kExitOk;
}

int cmd_equivalence(const Options& o, std::ostream& out) {
  EquivalenceOptions eo;
  eo.seeds = o.seeds;
  if (o.fault == "swap-delta") {
    eo.fault = KernelFault::swap_delta;
  } else if (o.fault != "none") {
    throw ConfigError("--fault: expected none or swap-delta, got \"" + o.fault + "\"");
  }
  if (eo.seeds < 1) throw ConfigError("--seeds: must be positive");
  const auto results = run_equivalence_suite(eo);
  bool all = true;
  for (const auto& r : results) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
    all = all && r.passed;
  }
  return all ? kExitOk : kExitPropertyFailure;
}

int cmd_ablation(const Options& o, std::ostream& out) {
  const Run run = load_run(o);
  const auto docs = corpus_documents(run.config.data.corpus, "data.corpus");
  std::vector<std::string> eval_docs;
  if (!run.config.data.eval_corpus.empty()) eval_docs = corpus_documents(run.config.data.eval_corpus, "data.eval_corpus");
  const PreparedData data = prepare_data(run.config, docs, eval_docs);
  const auto rows = run_ablation_suite(run.config, data, [&](const AblationRow& r) {
    out << r.variant << " final_mlm_loss " << format_double(r.final_mlm_loss) << " final_ppl "
        << format_double(r.final_ppl) << " batch_stream_hash " << r.batch_stream_hash << '\n'
        << std::flush;
  });
  write_ablation_csv(run.out / "ablation.csv", rows);
  // Expected direction: the full model ends no worse than either doubly
  // ablated variant. Reported, not enforced.
  const double full = rows.front().final_mlm_loss;
  for (const auto& r : rows) {
    if (r.variant.rfind("-(", 0) == 0) {
      out << "full <= " << r.variant << ": " << (full <= r.final_mlm_loss ? "yes" : "no") << '\n';
    }
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Disentangled attention language model toolkit", "dal"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config, "JSON run configuration");
    cmd->add_option("--set", o.overrides, "dotted key=value override, repeatable");
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--seed", o.seed, "overrides trainer.seed");
  };
  auto* pretrain = app.add_subcommand("pretrain", "train a model and write checkpoint and metrics");
  auto* eval = app.add_subcommand("eval", "print next-token perplexity of a checkpoint");
  auto* audit = app.add_subcommand("audit", "print parameter and cost formulas");
  auto* dump = app.add_subcommand("dump-attention", "write post-softmax attention maps as CSV");
  auto* equivalence = app.add_subcommand("equivalence", "naive vs efficient kernel audit");
  auto* ablation = app.add_subcommand("ablation-suite", "train the six ablation variants");
  for (auto* cmd : {pretrain, eval, audit, dump, equivalence, ablation}) add_common(cmd);
  for (auto* cmd : {eval, dump}) cmd->add_option("--checkpoint", o.checkpoint, "checkpoint file (default <out>/checkpoint.dal)");
  eval->add_option("--nll", o.nll, "write per-target NLL values here");
  dump->add_option("--text", o.text, "input text")->required();
  equivalence->add_option("--fault", o.fault, "test only: none or swap-delta");
  equivalence->add_option("--seeds", o.seeds, "number of random problems");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*pretrain) return cmd_pretrain(o, out);
    if (*eval) return cmd_eval(o, out);
    if (*audit) return cmd_audit(o, out);
    if (*dump) return cmd_dump_attention(o, out);
    if (*equivalence) return cmd_equivalence(o, out);
    if (*ablation) return cmd_ablation(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace dal
