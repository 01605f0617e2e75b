// End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.
//
//   acceptance [--workdir DIR] [--only A1,A5,...] [--max-epochs N]

#include "cli.hpp"
#include "ecglp/corpus_io.hpp"
#include "ecglp/eval.hpp"
#include "ecglp/training.hpp"
#include "grad_suite.hpp"
#include "loss_oracles.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

using namespace ecglp;
using namespace ecglp::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kSeeds[] = {1, 2, 3};
constexpr int kCorpusPairs = 2000;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Value of `metric` in a results.csv written by the tool.
double csv_metric(const fs::path& path, const std::string& metric) {
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() >= 3 && f[1] == metric) return std::stod(f[2]);
  }
  throw std::runtime_error("no " + metric + " in " + path.string());
}

// ---- runs through the command-line tool, shared across criteria ------------

class Runs {
 public:
  Runs(fs::path root, int max_epochs) : root_(std::move(root)), max_epochs_(max_epochs) {}

  void tool(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const Stopwatch sw;
    const int code = cli::run(args, out, err);
    tool_seconds_ += sw.seconds();
    if (code != cli::kExitOk) throw std::runtime_error(args.front() + " exited with " + std::to_string(code) + ": " + err.str());
  }

  fs::path corpus(std::uint64_t seed) {
    const fs::path dir = root_ / ("corpus_s" + std::to_string(seed));
    if (done_.insert(dir.string()).second) {
      tool({"synth", "--n", std::to_string(kCorpusPairs), "--seed",
            std::to_string(seed), "--out", dir.string()});
    }
    return dir;
  }

  /// Pretrains with `losses` ("g,lm,local" for the full objective), then
  /// evaluates zero-shot on the test split. `tag` separates repeated runs.
  fs::path pretrain(const std::string& losses, std::uint64_t seed, const std::string& tag = "") {
    std::string name = losses;
    for (char& ch : name) if (ch == ',') ch = '+';
    const fs::path dir = root_ / (name + "_s" + std::to_string(seed) + tag);
    if (done_.insert(dir.string()).second) {
      const fs::path c = corpus(seed);
      tool({"ablate", "--corpus", c.string(), "--out", dir.string(), "--losses", losses, "--seed",
            std::to_string(seed), "--epochs", std::to_string(max_epochs_), "--quiet"});
      tool({"eval", "--task", "zeroshot", "--ckpt", dir.string(), "--corpus", c.string(), "--out",
            (dir / "zeroshot").string()});
    }
    return dir;
  }

  double zero_shot(const std::string& losses, std::uint64_t seed) {
    return csv_metric(pretrain(losses, seed) / "zeroshot" / "results.csv", "macro_auroc");
  }

  double tool_seconds() const { return tool_seconds_; }
  void reset_clock() { tool_seconds_ = 0; }
  const fs::path& root() const { return root_; }

 private:
  fs::path root_;
  int max_epochs_;
  std::set<std::string> done_;
  double tool_seconds_ = 0;
};

const std::string kFull = "g,lm,local";

// ---- criteria ---------------------------------------------------------------

Outcome a1_gradients() {
  const Stopwatch sw;
  double worst = 0;
  std::string worst_name;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    for (const auto& [name, err] : primitive_grad_errors(seed)) {
      if (err > worst) worst = err, worst_name = name;
    }
  }

  const ModelConfig cfg = tiny_config();  // D=16, one layer each, N_B=2
  Rng rng(7);
  const auto pairs = tiny_batch(rng, 3);  // two sentences per report
  std::vector<const EcgTextPair*> batch;
  for (const auto& p : pairs) batch.push_back(&p);
  Model<double> m(cfg, 22);
  GradCheckOptions opts;
  opts.max_coords_per_param = 6;
  opts.seed = 1;
  const double full = grad_check([&] { return batch_loss(m, batch, LossSwitches{}, ForwardMode::eval()).total; },
                                 m.parameters().tensors(), opts);
  const double t = sw.seconds();
  return {worst <= 1e-5 && full <= 1e-5 && t < 120,
          fmt("primitives max rel err %.2e (%s), full objective %.2e, %.0f s", worst, worst_name.c_str(), full, t)};
}

struct OverfitRun {
  Corpus corpus;
  std::unique_ptr<Model<float>> model;
  TrainResult result;
  double seconds = 0;
};

OverfitRun overfit_64() {
  OverfitRun r;
  const Corpus c0 = make_corpus(64, ClassMix::default_mix(), 7);
  r.corpus = c0;
  r.corpus.train.clear();
  for (const auto* s : {&c0.train, &c0.val, &c0.test}) r.corpus.train.insert(r.corpus.train.end(), s->begin(), s->end());
  r.corpus.val.clear();
  r.corpus.test.clear();
  ModelConfig mc = ModelConfig::desk();
  mc.vocab_size = r.corpus.vocab.size();
  r.model = std::make_unique<Model<float>>(mc, 0);
  TrainConfig tc;
  tc.max_steps = 300;
  tc.early_stopping = false;
  const Stopwatch sw;
  r.result = pretrain(*r.model, r.corpus, tc);
  r.seconds = sw.seconds();
  return r;
}

Outcome a2_overfit(const OverfitRun& r) {
  const auto& losses = r.result.step_losses;
  if (losses.size() < 10) return {false, "fewer than 10 steps recorded"};
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    first += losses[i] / 5;
    last += losses[losses.size() - 1 - i] / 5;
  }
  const double drop = 1.0 - last / first;

  const auto& train = r.corpus.train;
  std::vector<TextReport> reports;
  for (const auto& p : train) reports.push_back(*p.report);
  const auto x = ecg_global_embeddings(*r.model, train);
  const auto t = text_global_embeddings(*r.model, reports);
  const auto groups = report_groups(train);
  const int k1[] = {1};
  const double r1 = recall_at_k(x, t, k1, &groups)[0];
  const double r1_index = recall_at_k(x, t, k1)[0];
  const std::set<int> distinct(groups.begin(), groups.end());
  return {drop >= 0.70 && r1 >= 0.90 && r.seconds < 300,
          fmt("loss %.3f -> %.3f (drop %.1f%%), R@1 %.3f over %zu distinct reports (index-exact %.3f), %.0f s", first,
              last, 100 * drop, r1, distinct.size(), r1_index, r.seconds)};
}

Outcome a2b_captions(const OverfitRun& r) {
  int exact = 0;
  const int max_len = r.model->config().max_text_len;
  for (const auto& p : r.corpus.train) exact += generate_report(*r.model, p.ecg, max_len) == p.report->token_ids;
  const auto n = static_cast<int>(r.corpus.train.size());
  return {2 * exact >= n, fmt("%d/%d training reports reproduced token-exactly", exact, n)};
}

Outcome a3_zero_shot(Runs& runs) {
  runs.reset_clock();
  std::vector<double> v;
  for (auto s : kSeeds) v.push_back(runs.zero_shot(kFull, s));
  const double m = mean_of(v), t = runs.tool_seconds();
  return {m >= 0.85 && t < 900, fmt("test macro AUROC %.4f / %.4f / %.4f, mean %.4f, %.0f s", v[0], v[1], v[2], m, t)};
}

Outcome a4_ablation(Runs& runs) {
  std::vector<double> full, g, lm;
  for (auto s : kSeeds) {
    full.push_back(runs.zero_shot(kFull, s));
    g.push_back(runs.zero_shot("g", s));
    lm.push_back(runs.zero_shot("lm", s));
  }
  const double mf = mean_of(full), mg = mean_of(g), ml = mean_of(lm);
  return {mf >= mg - 0.01 && mg >= ml, fmt("mean zero-shot AUROC full %.4f, g-only %.4f, lm-only %.4f", mf, mg, ml)};
}

Outcome a5_oracles() {
  constexpr double kTol = 1e-5;
  std::map<std::string, double> err;
  auto note = [&](const std::string& k, double e) { err[k] = std::max(err[k], e); };

  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int nb = 2 + trial % 4, ns = 1 + trial % 3, d = 3 + trial % 5;
    const Mat beats = random_matrix(rng, nb, d), sents = random_matrix(rng, ns, d);
    const auto att = beat_sentence_attention(Tensor<double>(beats), Tensor<double>(sents), 0.25);
    note("alpha", (att.alpha.value() - oracle_alpha(beats, sents, 0.25)).cwiseAbs().maxCoeff());
    const Mat bhat = oracle_bhat(beats, sents, 0.25);
    note("b_hat", (att.b_hat.value() - bhat).cwiseAbs().maxCoeff());
    note("Z", std::abs(pair_similarity(att.b_hat, Tensor<double>(sents), 0.1).item() - oracle_z(bhat, sents, 0.1)));
  }
  for (int b = 2; b <= 5; ++b) {
    std::vector<Mat> beats, sents;
    for (int i = 0; i < b; ++i) {
      beats.push_back(random_matrix(rng, 3, 5));
      sents.push_back(random_matrix(rng, 1 + i % 3, 5));
    }
    note("L_local", std::abs(local_contrastive(as_tensors(beats), as_tensors(sents), 0.25, 0.1).loss.item() -
                             oracle_local(beats, sents, 0.25, 0.1)));

    Mat x = random_matrix(rng, b, 6), t = random_matrix(rng, b, 6);
    Mat cos(b, b);
    for (Index i = 0; i < b; ++i) {
      for (Index k = 0; k < b; ++k) cos(i, k) = cos_row(x, i, t, k);
    }
    const auto g = global_contrastive(Tensor<double>(x), Tensor<double>(t), Tensor<double>::scalar(std::log(0.07)));
    note("L_g", std::abs(g.loss.item() - oracle_symmetric_ce(cos, 0.07)));

    const Mat logits = random_matrix(rng, b + 2, 9);
    std::vector<int> targets;
    for (int i = 0; i < b + 2; ++i) targets.push_back(i == 1 ? -1 : 1 + static_cast<int>(rng.below(8)));  // PAD (0) is never a target
    note("L_LM", std::abs(lm_loss(Tensor<double>(logits), targets).item() - oracle_nll(logits, targets)));
  }

  // AUROC: a hand case, then exact agreement with pair counting on tied scores.
  bool auroc_ok = auroc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}) == 0.75;
  for (int trial = 0; trial < 200 && auroc_ok; ++trial) {
    const int n = 4 + static_cast<int>(rng.below(40));
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(6));
      y[i] = i < 2 ? i : static_cast<int>(rng.below(2));
    }
    long long wins2 = 0, pairs = 0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (y[i] != 1 || y[j] != 0) continue;
        ++pairs;
        wins2 += s[i] > s[j] ? 2 : s[i] == s[j] ? 1 : 0;
      }
    }
    auroc_ok = auroc(s, y) == static_cast<double>(wins2) / (2.0 * static_cast<double>(pairs));
  }

  // Text metrics against hand-computed values.
  const std::vector<std::string> cand{"a", "b", "c", "d", "e"}, ref{"a", "b", "c", "d", "f"};
  const std::vector<std::string> shorter{"a", "b", "c"}, longer{"a", "b", "c", "d", "e", "f"};
  note("BLEU-1", std::abs(bleu(cand, {ref}, 1) - 0.8));
  note("BLEU-4", std::abs(bleu(cand, {ref}, 4) - std::pow(0.8 * 0.75 * (2.0 / 3.0) * 0.5, 0.25)));
  note("BLEU-1", std::abs(bleu(shorter, {longer}, 1) - std::exp(-1.0)));
  note("ROUGE-L", std::abs(rouge_l(cand, ref) - 0.8));
  note("ROUGE-L", std::abs(rouge_l(shorter, longer) - 2.44 * 0.5 / (0.5 + 1.44)));

  bool ok = auroc_ok;
  std::string worst;
  double worst_err = 0;
  for (const auto& [k, e] : err) {
    ok = ok && e <= kTol;
    if (e >= worst_err) worst_err = e, worst = k;
  }
  return {ok, fmt("%zu oracle families within %.0e (worst %s %.1e), AUROC pair counting %s", err.size(), kTol,
                  worst.c_str(), worst_err, auroc_ok ? "exact" : "MISMATCH")};
}

Outcome a6_probe_ratios(Runs& runs) {
  const std::vector<std::string> ratios{"0.01", "0.1", "1"};
  std::vector<std::vector<double>> v(ratios.size());
  for (auto s : kSeeds) {
    const fs::path dir = runs.pretrain(kFull, s);
    const fs::path out = dir / "probe";
    runs.tool({"eval", "--task", "probe", "--ckpt", dir.string(), "--corpus", runs.corpus(s).string(), "--out",
               out.string(), "--seed", std::to_string(s), "--ratios", "0.01,0.1,1"});
    for (std::size_t i = 0; i < ratios.size(); ++i) {
      v[i].push_back(csv_metric(out / "results.csv", "macro_auroc@" + ratios[i]));
    }
  }
  const double m1 = mean_of(v[0]), m10 = mean_of(v[1]), m100 = mean_of(v[2]);
  return {m10 >= m1 - 0.02 && m100 >= m10 - 0.02,
          fmt("mean probe AUROC 1%% %.4f, 10%% %.4f, 100%% %.4f", m1, m10, m100)};
}

Outcome a7_defaults(Runs& runs) {
  // Defaults as seen by the tool: an empty config file, read back from the run manifest.
  const fs::path dir = runs.root() / "defaults";
  fs::create_directories(dir);
  std::ofstream(dir / "empty.json") << R"({"model": {}, "train": {}})";
  const fs::path c = dir / "corpus";
  runs.tool({"synth", "--n", "64", "--seed", "1", "--out", c.string()});
  runs.tool({"pretrain", "--corpus", c.string(), "--config", (dir / "empty.json").string(), "--out",
             (dir / "run").string(), "--max-steps", "1", "--quiet"});
  const json cfg = json::parse(read_file(dir / "run" / "manifest.json"))["config"];
  const json& m = cfg["model"];
  const json& t = cfg["train"];

  const std::vector<std::tuple<const char*, double, double>> checks{
      {"tau1", m["tau_local"].get<double>(), 0.25},      {"tau2", m["tau_pair"].get<double>(), 0.1},
      {"lambda1", m["lambda_lm"].get<double>(), 2.0},    {"lambda2", m["lambda_local"].get<double>(), 0.2},
      {"lr", t["lr"].get<double>(), 2e-4},               {"weight_decay", t["weight_decay"].get<double>(), 0.2},
      {"patience", t["patience"].get<double>(), 5.0},
  };
  bool ok = true;
  std::string detail;
  for (const auto& [name, got, want] : checks) {
    if (got != want) ok = false;
    detail += fmt("%s%s=%g", detail.empty() ? "" : " ", name, got);
  }
  return {ok, detail};
}

Outcome a8_determinism(Runs& runs) {
  const fs::path a = runs.pretrain(kFull, 1);
  const fs::path b = runs.pretrain(kFull, 1, "_repeat");
  const bool train_same = read_file(a / "results.csv") == read_file(b / "results.csv");
  const bool eval_same = read_file(a / "zeroshot" / "results.csv") == read_file(b / "zeroshot" / "results.csv");
  return {train_same && eval_same, fmt("pretrain results.csv %s, zero-shot results.csv %s",
                                       train_same ? "identical" : "DIFFERENT", eval_same ? "identical" : "DIFFERENT")};
}

Outcome a9_retrieval(Runs& runs) {
  const int ks[] = {1, 5, 10};
  auto monotone = [](const std::vector<double>& r) { return r[0] <= r[1] && r[1] <= r[2]; };

  Rng rng(19);
  bool random_ok = true;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(40));
    const Mat q = random_matrix(rng, n, 4), g = trial % 2 ? Mat(q + 0.5 * random_matrix(rng, n, 4)) : random_matrix(rng, n, 4);
    random_ok = random_ok && monotone(recall_at_k(q, g, ks));
  }

  // Null: independent random embeddings for 100 patients; R@k should sit near k/100.
  std::vector<double> null1, null10;
  for (std::uint64_t s = 0; s < 5; ++s) {
    Rng r(100 + s);
    const auto rec = recall_at_k(random_matrix(r, 100, 16), random_matrix(r, 100, 16), ks);
    null1.push_back(rec[0]);
    null10.push_back(rec[2]);
  }
  const double n1 = mean_of(null1), n10 = mean_of(null10);
  const bool null_ok = n1 >= 0.0 && n1 <= 0.05 && std::abs(n10 - 0.10) <= 0.05;

  const fs::path dir = runs.pretrain(kFull, 1);
  const fs::path out = dir / "retrieval";
  runs.tool({"eval", "--task", "retrieval", "--ckpt", dir.string(), "--corpus", runs.corpus(1).string(), "--out",
             out.string(), "--ks", "1,5,10"});
  const std::vector<double> trained{csv_metric(out / "results.csv", "R@1"), csv_metric(out / "results.csv", "R@5"),
                                    csv_metric(out / "results.csv", "R@10")};
  return {random_ok && null_ok && monotone(trained),
          fmt("200 random cases %s; null R@1 %.3f, R@10 %.3f; trained R@1/5/10 %.3f/%.3f/%.3f",
              random_ok ? "monotone" : "NOT monotone", n1, n10, trained[0], trained[1], trained[2])};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string workdir = "acceptance_runs";
  std::vector<std::string> only;
  int max_epochs = 12;
  app.add_option("--workdir", workdir, "directory for corpora and runs")->capture_default_str();
  app.add_option("--only", only, "criteria to run, e.g. A1,A5")->delimiter(',');
  app.add_option("--max-epochs", max_epochs, "epoch cap for each pretraining run")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  fs::remove_all(workdir);
  fs::create_directories(workdir);
  Runs runs(workdir, max_epochs);
  std::unique_ptr<OverfitRun> overfit;
  auto get_overfit = [&]() -> const OverfitRun& {
    if (!overfit) overfit = std::make_unique<OverfitRun>(overfit_64());
    return *overfit;
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"A1", a1_gradients},
      {"A2", [&] { return a2_overfit(get_overfit()); }},
      {"A2b", [&] { return a2b_captions(get_overfit()); }},
      {"A3", [&] { return a3_zero_shot(runs); }},
      {"A4", [&] { return a4_ablation(runs); }},
      {"A5", a5_oracles},
      {"A6", [&] { return a6_probe_ratios(runs); }},
      {"A7", [&] { return a7_defaults(runs); }},
      {"A8", [&] { return a8_determinism(runs); }},
      {"A9", [&] { return a9_retrieval(runs); }},
  };

  int failures = 0;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << id << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
