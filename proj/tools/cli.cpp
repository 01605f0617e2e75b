#include "cli.hpp"

#include "ecglp/checkpoint.hpp"
#include "ecglp/corpus_io.hpp"
#include "ecglp/eval.hpp"
#include "ecglp/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <ostream>
#include <sstream>

#ifndef ECGLP_CODE_VERSION
#define ECGLP_CODE_VERSION "unknown"
#endif

namespace ecglp::cli {

const char* code_version() { return ECGLP_CODE_VERSION; }

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  ModelConfig model = ModelConfig::desk();
  TrainConfig train;
};

json to_json(const RunConfig& c) { return json{{"model", c.model}, {"train", c.train}}; }

RunConfig load_config(const std::string& path) {
  RunConfig c;
  if (path.empty()) return c;
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "model") {
      from_json(value, c.model);
    } else if (key == "train") {
      from_json(value, c.train);
    } else {
      throw ConfigError("unknown config section '" + key + "' (expected model, train)");
    }
  }
  return c;
}

// Flags that override config-file values only when given.
class Overrides {
 public:
  template <typename T>
  void add(CLI::App* app, const std::string& name, const std::string& help, std::function<T&(RunConfig&)> field) {
    auto value = std::make_shared<T>();
    auto* opt = app->add_option(name, *value, help);
    appliers_.push_back([opt, value, field](RunConfig& c) {
      if (opt->count() > 0) field(c) = *value;
    });
  }
  void add_flag(CLI::App* app, const std::string& name, const std::string& help,
                std::function<void(RunConfig&)> set) {
    auto* opt = app->add_flag(name, help);
    appliers_.push_back([opt, set](RunConfig& c) {
      if (opt->count() > 0) set(c);
    });
  }
  void apply(RunConfig& c) const {
    for (const auto& f : appliers_) f(c);
  }

 private:
  std::vector<std::function<void(RunConfig&)>> appliers_;
};

void add_training_flags(CLI::App* app, Overrides& o) {
  o.add<double>(app, "--lr", "initial learning rate", [](RunConfig& c) -> double& { return c.train.lr; });
  o.add<double>(app, "--weight-decay", "AdamW weight decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });
  o.add<int>(app, "--batch-size", "pairs per step", [](RunConfig& c) -> int& { return c.train.batch_size; });
  o.add<int>(app, "--epochs", "maximum epochs", [](RunConfig& c) -> int& { return c.train.max_epochs; });
  o.add<int>(app, "--max-steps", "step cap (0 = none)", [](RunConfig& c) -> int& { return c.train.max_steps; });
  o.add<int>(app, "--patience", "early-stopping patience in epochs", [](RunConfig& c) -> int& { return c.train.patience; });
  o.add<int>(app, "--eval-every", "extra validation every N steps", [](RunConfig& c) -> int& { return c.train.eval_every; });
  o.add<std::string>(app, "--schedule", "cosine or constant", [](RunConfig& c) -> std::string& { return c.train.schedule; });
  o.add<int>(app, "--dim", "model width", [](RunConfig& c) -> int& { return c.model.dim; });
  o.add_flag(app, "--no-early-stop", "train for the full budget", [](RunConfig& c) { c.train.early_stopping = false; });
  o.add_flag(app, "--literal-beat-sum", "pool sentence embeddings with the attention mass (literal form)",
             [](RunConfig& c) { c.model.literal_beat_sum = true; });
  o.add_flag(app, "--lm-sum", "sum the captioning loss over tokens", [](RunConfig& c) { c.model.lm_sum_reduction = true; });
  o.add_flag(app, "--freeze-text", "keep text-encoder weights fixed", [](RunConfig& c) { c.model.train_text_encoder = false; });
  o.add_flag(app, "--full-scale", "use the large model shape", [](RunConfig& c) {
    const int vocab = c.model.vocab_size;
    c.model = ModelConfig::full_scale();
    c.model.vocab_size = vocab;
  });
}

void set_losses(TrainConfig& t, const std::string& spec) {
  t.use_global = t.use_lm = t.use_local = false;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "g") {
      t.use_global = true;
    } else if (item == "lm") {
      t.use_lm = true;
    } else if (item == "local") {
      t.use_local = true;
    } else {
      throw UsageError("unknown loss '" + item + "' (expected g, lm, local)");
    }
  }
  if (!(t.use_global || t.use_lm || t.use_local)) throw UsageError("--losses selects no loss");
}

std::string losses_name(const TrainConfig& t) {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += "+";
    s += name;
  };
  add(t.use_global, "g");
  add(t.use_lm, "lm");
  add(t.use_local, "local");
  return s;
}

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_json_file(const fs::path& path, const json& j) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw DataError("cannot write " + path.string());
    os << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

// manifest.json goes down before any computation and is completed at exit.
class Manifest {
 public:
  Manifest(fs::path out, const std::string& command, const std::vector<std::string>& args, json config, json seeds,
           json outputs)
      : path_(std::move(out) / "manifest.json"), start_(std::chrono::steady_clock::now()) {
    data_ = json{{"command", command}, {"args", args},       {"config", std::move(config)},
                 {"seeds", std::move(seeds)}, {"code_version", code_version()}, {"outputs", std::move(outputs)},
                 {"wall_clock", {{"started", now_utc()}}}};
    fs::create_directories(path_.parent_path());
    write_json_file(path_, data_);
  }
  void note(const std::string& key, json value) { data_[key] = std::move(value); }
  void finish(const std::string& status) {
    data_["status"] = status;
    data_["wall_clock"]["finished"] = now_utc();
    data_["wall_clock"]["elapsed_s"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write_json_file(path_, data_);
  }

 private:
  fs::path path_;
  json data_;
  std::chrono::steady_clock::time_point start_;
};

json seed_streams(std::uint64_t seed) {
  return json{{"seed", seed},
              {"corpus", seed},
              {"init", Rng::derive(seed, "init")},
              {"shuffle", Rng::derive(seed, "shuffle")},
              {"dropout", Rng::derive(seed, "dropout")},
              {"probe", Rng::derive(seed, "probe")}};
}

fs::path resolve_checkpoint(const fs::path& p) {
  if (fs::is_directory(p)) {
    for (const char* name : {"checkpoints/best.ckpt", "checkpoints/mlm.ckpt", "best.ckpt", "mlm.ckpt"}) {
      if (fs::exists(p / name)) return p / name;
    }
    throw DataError("no checkpoint found under " + p.string());
  }
  if (!fs::exists(p)) throw DataError("checkpoint " + p.string() + " does not exist");
  return p;
}

Model<float> load_model(const fs::path& ckpt_path, const Corpus* corpus) {
  const auto ck = load_checkpoint(resolve_checkpoint(ckpt_path));
  const ModelConfig cfg = ck.model_config();
  if (corpus && cfg.vocab_size != corpus->vocab.size()) {
    throw DataError("checkpoint vocabulary (" + std::to_string(cfg.vocab_size) + ") does not match corpus vocabulary (" +
                    std::to_string(corpus->vocab.size()) + ")");
  }
  Model<float> model(cfg, 0);
  restore_parameters(model, ck);
  return model;
}

struct OutputFiles {
  fs::path dir;
  fs::path metrics() const { return dir / "metrics.jsonl"; }
  fs::path results() const { return dir / "results.csv"; }
  fs::path results_jsonl() const { return dir / "results.jsonl"; }
  fs::path checkpoints() const { return dir / "checkpoints"; }

  // Each command owns its output directory, so reruns replace rather than append.
  void reset() const {
    for (const auto& p : {metrics(), results(), results_jsonl()}) fs::remove(p);
  }
  static json layout() {
    return json{{"manifest", "manifest.json"},
                {"metrics", "metrics.jsonl"},
                {"results", "results.csv"},
                {"results_jsonl", "results.jsonl"},
                {"checkpoints", "checkpoints/"}};
  }
};

void emit(const OutputFiles& files, const std::vector<EvalResult>& rows, std::ostream& out) {
  append_results_csv(files.results(), rows);
  append_results_jsonl(files.results_jsonl(), rows);
  for (const auto& r : rows) out << r.task << ' ' << r.metric << ' ' << r.value << " (n=" << r.n_samples << ")\n";
}

std::vector<double> parse_doubles(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(std::string("bad value '") + item + "' in " + what);
    }
  }
  if (out.empty()) throw UsageError(std::string(what) + " is empty");
  return out;
}

// ---------------------------------------------------------------------------
// Commands.

struct SynthArgs {
  int n = 2000;
  std::string classes = ClassMix::default_mix().to_string();
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_synth(const SynthArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  ClassMix mix;
  try {
    mix = ClassMix::parse(a.classes);
    mix.validate();
  } catch (const DataError& e) {
    throw UsageError(std::string("invalid --classes: ") + e.what());
  }
  if (a.n < 10) throw UsageError("--n must be at least 10");
  Manifest manifest(a.out, "synth", args, json{{"n", a.n}, {"classes", mix.to_string()}}, seed_streams(a.seed),
                    json{{"manifest", "manifest.json"}, {"corpus", "corpus.json"}});
  Corpus corpus = make_corpus(a.n, mix, a.seed);
  corpus.train = filter_pairs(std::move(corpus.train));
  corpus.val = filter_pairs(std::move(corpus.val));
  corpus.test = filter_pairs(std::move(corpus.test));
  save_corpus(corpus, a.out);
  manifest.note("splits", {{"train", corpus.train.size()}, {"val", corpus.val.size()}, {"test", corpus.test.size()}});
  manifest.finish("ok");
  out << "wrote " << corpus.size() << " pairs (" << corpus.train.size() << '/' << corpus.val.size() << '/'
      << corpus.test.size() << ") to " << a.out << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string corpus, config, out, mlm_init, losses;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

RunConfig merged_config(const TrainArgs& a, const Overrides& o) {
  RunConfig c = load_config(a.config);
  o.apply(c);
  if (a.seed) c.train.seed = *a.seed;
  if (!a.losses.empty()) set_losses(c.train, a.losses);
  c.train.validate();
  return c;
}

// Shared by pretrain and ablate.
int run_pretrain(const std::string& command, const TrainArgs& a, const Overrides& o,
                 const std::vector<std::string>& args, std::ostream& out) {
  RunConfig c = merged_config(a, o);
  const OutputFiles files{a.out};
  Manifest manifest(a.out, command, args, to_json(c), seed_streams(c.train.seed), OutputFiles::layout());
  files.reset();

  std::optional<Checkpoint> text_init;
  if (!a.mlm_init.empty()) text_init = load_checkpoint(resolve_checkpoint(a.mlm_init));

  const Corpus corpus = load_corpus(a.corpus);
  c.model.vocab_size = corpus.vocab.size();
  c.model.validate();
  manifest.note("model_config_hash", config_hash(c.model));

  Model<float> model(c.model, c.train.seed);
  std::ofstream metrics(files.metrics());
  TrainContext<float> ctx;
  ctx.metrics = &metrics;
  ctx.checkpoint_dir = files.checkpoints();
  ctx.text_init = text_init ? &*text_init : nullptr;
  if (!a.quiet) ctx.progress = &out;
  const auto r = pretrain(model, corpus, c.train, ctx);
  metrics.flush();

  const std::string hash = config_hash(c.model);
  const std::string task = command == "ablate" ? "ablate:" + losses_name(c.train) : "pretrain";
  std::vector<EvalResult> rows;
  if (r.best_val_metric) {
    rows.push_back({task, "best_val_macro_auroc", *r.best_val_metric, static_cast<int>(corpus.val.size()),
                    c.train.seed, hash});
  }
  rows.push_back({task, "epochs", static_cast<double>(r.epochs_run), static_cast<int>(corpus.train.size()),
                  c.train.seed, hash});
  if (!corpus.test.empty()) {
    const auto z = zero_shot_auroc(model, corpus.test, codes_in(corpus.mix), corpus.vocab);
    rows.push_back({task, "test_zeroshot_macro_auroc", z.value, static_cast<int>(corpus.test.size()), c.train.seed,
                    hash});
  }
  emit(files, rows, out);
  manifest.note("result", {{"steps", r.steps}, {"epochs", r.epochs_run}, {"best_epoch", r.best_epoch}});
  manifest.finish("ok");
  return kExitOk;
}

struct MlmArgs {
  std::string corpus, config, out;
  std::optional<std::uint64_t> seed;
  int steps = 200;
  bool quiet = false;
};

int cmd_mlm(const MlmArgs& a, const Overrides& o, const std::vector<std::string>& args, std::ostream& out) {
  RunConfig c = load_config(a.config);
  o.apply(c);
  if (a.seed) c.train.seed = *a.seed;
  if (c.train.max_steps == 0) c.train.max_steps = a.steps;
  c.train.validate();
  const OutputFiles files{a.out};
  Manifest manifest(a.out, "mlm", args, to_json(c), seed_streams(c.train.seed), OutputFiles::layout());
  files.reset();
  const Corpus corpus = load_corpus(a.corpus);
  c.model.vocab_size = corpus.vocab.size();
  c.model.validate();
  std::vector<TextReport> reports;
  for (const auto& p : corpus.train) {
    if (p.report) reports.push_back(*p.report);
  }
  Model<float> model(c.model, c.train.seed);
  std::ofstream metrics(files.metrics());
  TrainContext<float> ctx;
  ctx.metrics = &metrics;
  ctx.checkpoint_dir = files.checkpoints();
  if (!a.quiet) ctx.progress = &out;
  const auto r = text_mlm_pretrain(model, reports, c.train, ctx);
  double tail = 0;
  const std::size_t k = std::min<std::size_t>(10, r.step_losses.size());
  for (std::size_t i = r.step_losses.size() - k; i < r.step_losses.size(); ++i) tail += r.step_losses[i] / k;
  emit(files, {{"mlm", "final_mlm_loss", tail, static_cast<int>(reports.size()), c.train.seed, config_hash(c.model)}},
       out);
  manifest.finish("ok");
  return kExitOk;
}

struct EvalArgs {
  std::string task, ckpt, corpus, out, mapping, target_corpus, via = "zeroshot";
  std::string ratios = "0.01,0.1,1.0";
  std::string ks = "1,5,10";
  std::uint64_t seed = 0;
  bool prompt_ensemble = false;
  bool embeddings = false;
  int max_len = 0;
};

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  static const std::set<std::string> tasks{"zeroshot", "probe", "transfer", "retrieval", "caption"};
  if (!tasks.count(a.task)) throw UsageError("unknown --task " + a.task);
  if (a.task == "transfer" && a.mapping.empty()) throw UsageError("--task transfer needs --mapping <file>");
  if (a.via != "zeroshot" && a.via != "probe") throw UsageError("--via must be zeroshot or probe");
  const auto ratios = a.task == "probe" ? parse_doubles(a.ratios, "--ratios") : std::vector<double>{};
  for (double r : ratios) {
    if (!(r > 0.0 && r <= 1.0)) throw UsageError("--ratios values must lie in (0, 1]");
  }
  std::vector<int> ks;
  for (double k : parse_doubles(a.ks, "--ks")) {
    if (k < 1 || k != std::floor(k)) throw UsageError("--ks values must be positive integers");
    ks.push_back(static_cast<int>(k));
  }

  const OutputFiles files{a.out};
  Manifest manifest(a.out, "eval", args,
                    json{{"task", a.task}, {"ckpt", a.ckpt}, {"corpus", a.corpus}, {"mapping", a.mapping},
                         {"ratios", a.ratios}, {"ks", a.ks}, {"via", a.via}, {"prompt_ensemble", a.prompt_ensemble},
                         {"prompt_table", (a.prompt_ensemble ? PromptTable::ensemble() : PromptTable::standard()).to_json()}},
                    seed_streams(a.seed), OutputFiles::layout());
  files.reset();

  const Corpus corpus = load_corpus(a.corpus);
  const Model<float> model = load_model(a.ckpt, &corpus);
  const std::string hash = config_hash(model.config());
  const auto classes = codes_in(corpus.mix);
  const auto names = code_names(classes);
  const PromptTable prompts = a.prompt_ensemble ? PromptTable::ensemble() : PromptTable::standard();
  const int n_test = static_cast<int>(corpus.test.size());
  std::vector<EvalResult> rows;

  if (a.task == "zeroshot") {
    const auto z = zero_shot_auroc(model, corpus.test, classes, corpus.vocab, prompts);
    rows.push_back({"zeroshot", "macro_auroc", z.value, n_test, a.seed, hash});
    for (const auto& [name, v] : z.per_label) rows.push_back({"zeroshot", "auroc_" + name, v, n_test, a.seed, hash});
  } else if (a.task == "probe") {
    const auto train_x = extract_features(model, corpus.train);
    const auto val_x = extract_features(model, corpus.val);
    const auto test_x = extract_features(model, corpus.test);
    const auto train_y = label_matrix(corpus.train, classes);
    std::vector<std::string> keys;
    for (const auto& p : corpus.train) keys.push_back(label_set_name(p.ecg.labels));
    for (double ratio : ratios) {
      const auto idx = stratified_subsample(keys, ratio, Rng::derive(a.seed, "probe"));
      Matrix<double> sx(static_cast<Index>(idx.size()), train_x.cols());
      Matrix<int> sy(static_cast<Index>(idx.size()), train_y.cols());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        sx.row(static_cast<Index>(i)) = train_x.row(static_cast<Index>(idx[i]));
        sy.row(static_cast<Index>(i)) = train_y.row(static_cast<Index>(idx[i]));
      }
      const auto r = linear_probe(sx, sy, val_x, label_matrix(corpus.val, classes), test_x,
                                  label_matrix(corpus.test, classes), names, a.seed);
      std::ostringstream metric;
      metric << "macro_auroc@" << ratio;
      rows.push_back({"probe", metric.str(), r.test_auroc, r.n_train, a.seed, hash});
    }
  } else if (a.task == "transfer") {
    const auto mapping = LabelMapping::load(a.mapping);
    const Corpus target = a.target_corpus.empty() ? corpus : load_corpus(a.target_corpus);
    if (target.vocab.words() != corpus.vocab.words()) throw DataError("target corpus uses a different vocabulary");
    Matrix<double> scores;
    if (a.via == "zeroshot") {
      scores = zero_shot_scores(model, target.test, classes, corpus.vocab, prompts).scores;
    } else {
      const auto r = linear_probe(extract_features(model, corpus.train), label_matrix(corpus.train, classes),
                                  extract_features(model, corpus.val), label_matrix(corpus.val, classes),
                                  extract_features(model, target.test), label_matrix(target.test, classes), names,
                                  a.seed);
      scores = r.test_scores;
    }
    std::vector<std::set<std::string>> targets;
    for (const auto& p : target.test) targets.push_back(target_labels(p.ecg.labels, mapping));
    const auto t = transfer_eval(scores, names, targets, mapping);
    const int n = static_cast<int>(target.test.size());
    rows.push_back({"transfer:" + a.via, "macro_auroc", t.value, n, a.seed, hash});
    for (const auto& [name, v] : t.per_label) rows.push_back({"transfer:" + a.via, "auroc_" + name, v, n, a.seed, hash});
  } else if (a.task == "retrieval") {
    const auto second = revisit_records(corpus, corpus.test);
    const auto r = recall_at_k(ecg_global_embeddings(model, corpus.test), ecg_global_embeddings(model, second), ks);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      rows.push_back({"retrieval", "R@" + std::to_string(ks[i]), r[i], n_test, a.seed, hash});
    }
  } else {
    const int max_len = a.max_len > 0 ? a.max_len : model.config().max_text_len;
    double b1 = 0, b4 = 0, rl = 0, exact = 0;
    for (const auto& p : corpus.test) {
      const auto ids = generate_report(model, p.ecg, max_len);
      const auto cand = decoded_words(ids, corpus.vocab);
      const auto ref = decoded_words(p.report->token_ids, corpus.vocab);
      b1 += bleu(cand, {ref}, 1);
      b4 += bleu(cand, {ref}, 4);
      rl += rouge_l(cand, ref);
      exact += ids == p.report->token_ids;
    }
    const double n = std::max(1, n_test);
    rows.push_back({"caption", "bleu1", b1 / n, n_test, a.seed, hash});
    rows.push_back({"caption", "bleu4", b4 / n, n_test, a.seed, hash});
    rows.push_back({"caption", "rouge_l", rl / n, n_test, a.seed, hash});
    rows.push_back({"caption", "exact_match", exact / n, n_test, a.seed, hash});
  }
  if (a.embeddings) write_embeddings_csv(a.out + "/embeddings.csv", corpus.test, ecg_global_embeddings(model, corpus.test));
  emit(files, rows, out);
  manifest.finish("ok");
  return kExitOk;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const ConfigError*>(&e)) return kExitUsage;
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  return kExitData;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"ECG-text pretraining and evaluation", "ecglp"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(code_version()));

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "synthesize a paired ECG/report corpus");
  s->add_option("--n", synth.n, "number of pairs")->capture_default_str();
  s->add_option("--classes", synth.classes, "class mix, e.g. NORM,AFIB or NORM:0.5,AFIB+STE:0.5")->capture_default_str();
  s->add_option("--seed", synth.seed, "corpus seed")->capture_default_str();
  s->add_option("--out", synth.out, "corpus directory")->required();

  TrainArgs pre;
  Overrides pre_o;
  auto* p = app.add_subcommand("pretrain", "multimodal pretraining");
  p->add_option("--corpus", pre.corpus, "corpus directory")->required();
  p->add_option("--config", pre.config, "JSON config with optional model/train sections");
  p->add_option("--out", pre.out, "run directory")->required();
  p->add_option("--mlm-init", pre.mlm_init, "MLM checkpoint (file or run directory) for the text encoder");
  p->add_option("--seed", pre.seed, "init, shuffle and dropout seed");
  p->add_option("--losses", pre.losses, "subset of g,lm,local");
  p->add_flag("--quiet", pre.quiet, "no per-epoch progress");
  add_training_flags(p, pre_o);

  TrainArgs abl;
  Overrides abl_o;
  auto* b = app.add_subcommand("ablate", "pretraining with a subset of the loss terms");
  b->add_option("--corpus", abl.corpus, "corpus directory")->required();
  b->add_option("--config", abl.config, "JSON config");
  b->add_option("--out", abl.out, "run directory")->required();
  b->add_option("--losses", abl.losses, "subset of g,lm,local")->required();
  b->add_option("--seed", abl.seed, "init, shuffle and dropout seed");
  b->add_option("--mlm-init", abl.mlm_init, "MLM checkpoint for the text encoder");
  b->add_flag("--quiet", abl.quiet, "no per-epoch progress");
  add_training_flags(b, abl_o);

  MlmArgs mlm;
  Overrides mlm_o;
  auto* m = app.add_subcommand("mlm", "masked-language-model stage for the text encoder");
  m->add_option("--corpus", mlm.corpus, "corpus directory")->required();
  m->add_option("--config", mlm.config, "JSON config");
  m->add_option("--out", mlm.out, "run directory")->required();
  m->add_option("--seed", mlm.seed, "seed");
  m->add_option("--steps", mlm.steps, "optimizer steps when the config sets no max_steps")->capture_default_str();
  m->add_flag("--quiet", mlm.quiet, "no per-epoch progress");
  add_training_flags(m, mlm_o);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "downstream evaluation of a checkpoint");
  e->add_option("--task", ev.task, "zeroshot, probe, transfer, retrieval or caption")->required();
  e->add_option("--ckpt", ev.ckpt, "checkpoint file or run directory")->required();
  e->add_option("--corpus", ev.corpus, "corpus directory")->required();
  e->add_option("--out", ev.out, "output directory")->required();
  e->add_option("--seed", ev.seed, "probe seed")->capture_default_str();
  e->add_option("--ratios", ev.ratios, "probe training fractions")->capture_default_str();
  e->add_option("--mapping", ev.mapping, "label mapping JSON (transfer)");
  e->add_option("--target-corpus", ev.target_corpus, "target corpus (transfer; default: --corpus)");
  e->add_option("--via", ev.via, "transfer scores from zeroshot or probe")->capture_default_str();
  e->add_option("--ks", ev.ks, "recall cut-offs")->capture_default_str();
  e->add_option("--max-len", ev.max_len, "caption length limit (default: model max)");
  e->add_flag("--prompt-ensemble", ev.prompt_ensemble, "average several prompts per class");
  e->add_flag("--embeddings", ev.embeddings, "also write embeddings.csv for the test split");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (s->parsed()) return cmd_synth(synth, args, out);
    if (p->parsed()) return run_pretrain("pretrain", pre, pre_o, args, out);
    if (b->parsed()) return run_pretrain("ablate", abl, abl_o, args, out);
    if (m->parsed()) return cmd_mlm(mlm, mlm_o, args, out);
    if (e->parsed()) return cmd_eval(ev, args, out);
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return exit_code_for(ex);
  }
  return kExitUsage;
}

}  // namespace ecglp::cli
