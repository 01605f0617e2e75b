#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ecglp/grad_check.hpp"
#include "ecglp/model.hpp"
#include "test_util.hpp"

#include <json.hpp>

using namespace ecglp;
using ecglp::testing::constant;
using ecglp::testing::random_matrix;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.dim = 16;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.ecg_layers = 1;
  c.text_enc_layers = 1;
  c.text_dec_layers = 1;
  c.input_leads = 2;
  c.conv_strides = {4, 4};
  c.norm_groups = 4;
  c.caption_queries = 3;
  c.beat_tokens = 2;
  c.vocab_size = 12;
  c.max_text_len = 10;
  c.dropout = 0.0;
  return c;
}

ECGRecord random_record(Rng& rng, int leads, int samples) {
  ECGRecord r;
  r.signal = random_matrix<float>(rng, leads, samples, 0.5);
  r.sampling_rate_hz = 100;
  return r;
}

TextReport report_from(std::vector<int> ids, std::vector<Span> spans) {
  TextReport r;
  r.token_ids = std::move(ids);
  r.sentence_spans = std::move(spans);
  return r;
}

double max_abs_diff(const Matrix<double>& a, const Matrix<double>& b) { return (a - b).cwiseAbs().maxCoeff(); }

double check(const std::function<Tensor<double>()>& fn, Model<double>& model) {
  GradCheckOptions opts;
  opts.max_coords_per_param = 6;
  opts.seed = 3;
  return grad_check(fn, model.parameters().tensors(), opts);
}

Tensor<double> project_scalar(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, Tensor<double>(random_matrix(rng, y.rows(), y.cols()))));
}

}  // namespace

TEST_CASE("config defaults, JSON round trip and validation") {
  const ModelConfig c;
  CHECK(c.tau_local == 0.25);
  CHECK(c.tau_pair == 0.1);
  CHECK(c.lambda_lm == 2.0);
  CHECK(c.lambda_local == 0.2);
  CHECK(c.beat_tokens == 10);
  const TrainConfig t;
  CHECK(t.lr == 2e-4);
  CHECK(t.weight_decay == 0.2);
  CHECK(t.patience == 5);

  ModelConfig edited = c;
  edited.dim = 32;
  edited.projector = ProjectorKind::kLinear;
  nlohmann::json j = edited;
  ModelConfig back;
  from_json(j, back);
  CHECK(nlohmann::json(back) == j);
  CHECK(config_hash(back) == config_hash(edited));
  CHECK(config_hash(back) != config_hash(c));

  ModelConfig partial;
  from_json(nlohmann::json{{"beat_tokens", 3}}, partial);
  CHECK(partial.beat_tokens == 3);
  CHECK(partial.dim == c.dim);

  ModelConfig bad;
  bad.heads = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.beat_tokens = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.tau_local = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  TrainConfig bt;
  bt.batch_size = 1;
  CHECK_THROWS_AS(bt.validate(), ConfigError);
  CHECK_THROWS_AS(from_json(nlohmann::json{{"dim", "wide"}}, partial), ConfigError);
}

TEST_CASE("feature extractor length, finiteness and amplitude sensitivity") {
  ModelConfig c = tiny_config();
  c.input_leads = 4;
  Model<double> m(c, 1);
  Rng rng(2);
  const auto mode = ForwardMode::eval();

  Matrix<double> sig = random_matrix(rng, 4, 4000);
  CHECK(m.ecg_feature_extract(sig, mode).rows() == 250);
  CHECK(m.ecg_feature_extract(sig, mode).cols() == c.dim);
  CHECK(m.ecg_feature_extract(Matrix<double>(random_matrix(rng, 4, 1000)), mode).rows() == 62);

  const auto zero = m.ecg_feature_extract(Matrix<double>::Zero(4, 400), mode);
  CHECK(zero.value().allFinite());

  // Zero conv biases make conv + group norm scale-invariant up to eps, so the
  // difference is tiny at init; with nonzero biases amplitude is visible.
  CHECK(max_abs_diff(m.ecg_feature_extract(sig, mode).value(),
                     m.ecg_feature_extract(Matrix<double>(2.0 * sig), mode).value()) > 0.0);
  for (auto& p : m.parameters().tensors()) {
    if (p.name() == "ecg.conv0.bias" || p.name() == "ecg.conv1.bias") p.mutable_value() = random_matrix(rng, 1, c.dim, 0.5);
  }
  const auto a = m.ecg_feature_extract(sig, mode).value();
  const auto b = m.ecg_feature_extract(Matrix<double>(2.0 * sig), mode).value();
  CHECK(max_abs_diff(a, b) > 1e-3);

  CHECK_THROWS_AS(m.ecg_feature_extract(Matrix<double>::Zero(4, 15), mode), ShapeError);
  CHECK_THROWS_AS(m.ecg_feature_extract(Matrix<double>::Zero(3, 400), mode), ShapeError);
}

TEST_CASE("ecg_encode shapes and positional sensitivity") {
  Model<double> m(tiny_config(), 4);
  Rng rng(5);
  const auto mode = ForwardMode::eval();
  CHECK(m.ecg_encode(Tensor<double>(random_matrix(rng, 1, 16)), mode).shape() == std::array<Index, 2>{1, 16});

  Matrix<double> f = random_matrix(rng, 6, 16);
  Matrix<double> swapped = f;
  swapped.row(0).swap(swapped.row(1));
  const auto out = m.ecg_encode(Tensor<double>(f), mode).value();
  const auto out_sw = m.ecg_encode(Tensor<double>(swapped), mode).value();
  CHECK(out.rows() == 6);
  // Without positions, swapping inputs would only swap outputs.
  CHECK((out.row(0) - out_sw.row(1)).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("attention pooler: single key, identical keys, stochastic weights") {
  ParameterSet<double> ps;
  Rng rng(6);
  AttentionPooler<double> single(ps, "single", 3, 8, 1, rng);
  const Tensor<double> e(random_matrix(rng, 1, 8));
  const auto pooled = single(e).value();
  const auto expected = single.norm(single.attn.o(single.attn.v(e))).value();
  for (Index q = 0; q < 3; ++q) CHECK(max_abs_diff(pooled.row(q), expected) < 1e-12);

  AttentionPooler<double> multi(ps, "multi", 4, 8, 2, rng);
  Matrix<double> same(5, 8);
  same.rowwise() = random_matrix(rng, 1, 8).row(0);
  std::vector<Matrix<double>> w;
  multi(Tensor<double>(same), &w);
  REQUIRE(!w.empty());
  for (const auto& head : w) CHECK((head.array() - 0.2).abs().maxCoeff() < 1e-12);

  w.clear();
  multi(Tensor<double>(random_matrix(rng, 7, 8)), &w);
  for (const auto& head : w) CHECK((head.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
}

TEST_CASE("text encoder is causal and bounded by max_text_len") {
  Model<double> m(tiny_config(), 7);
  const auto mode = ForwardMode::eval();
  const std::vector<int> a{kBos, 6, 7, 8, 9, kEos};
  const std::vector<int> b{kBos, 6, 7, 11, 10, kEos};
  const auto ha = m.text_hidden(a, mode).value();
  const auto hb = m.text_hidden(b, mode).value();
  CHECK(max_abs_diff(ha.topRows(3), hb.topRows(3)) == 0.0);
  CHECK(max_abs_diff(ha.bottomRows(1), hb.bottomRows(1)) > 1e-6);

  const auto one = m.encode_text(report_from({kBos, 6, kEos}, {{0, 1}}), mode);
  CHECK(one.cls.rows() == 1);
  CHECK(one.cls.value().allFinite());
  CHECK(one.S.rows() == 1);
  CHECK(max_abs_diff(one.S.value(), one.words.value()) == 0.0);

  CHECK_THROWS_AS(m.text_hidden(std::vector<int>(11, 6), mode), ShapeError);
}

TEST_CASE("sentence_embed averages word rows") {
  const auto words = constant<double>({{1, 0}, {0, 1}, {3, 3}});
  const std::vector<Span> spans{{0, 2}, {2, 3}};
  const auto s = sentence_embed(words, std::span<const Span>(spans)).value();
  CHECK(s(0, 0) == 0.5);
  CHECK(s(0, 1) == 0.5);
  CHECK(s(1, 0) == 3.0);
  const auto twins = constant<double>({{2, -1}, {2, -1}});
  const std::vector<Span> both{{0, 2}};
  CHECK(max_abs_diff(sentence_embed(twins, std::span<const Span>(both)).value(), twins.value().topRows(1)) == 0.0);
  const std::vector<Span> empty{{1, 1}};
  CHECK_THROWS_AS(sentence_embed(words, std::span<const Span>(empty)), ShapeError);
}

TEST_CASE("projector shapes and zero weights") {
  ParameterSet<double> ps;
  Rng rng(8);
  Projector<double> p(ps, "p", 8, ProjectorKind::kMlp, rng);
  CHECK(p(Tensor<double>(random_matrix(rng, 10, 8))).shape() == std::array<Index, 2>{10, 8});
  p.fc1.weight.mutable_value().setZero();
  p.fc2.weight.mutable_value().setZero();
  p.fc2.bias.mutable_value().setConstant(0.25);
  const auto out = p(Tensor<double>(random_matrix(rng, 3, 8))).value();
  CHECK((out.array() - 0.25).abs().maxCoeff() == 0.0);
}

TEST_CASE("caption decoder is causal and depends on the pooled context") {
  Model<double> m(tiny_config(), 9);
  Rng rng(10);
  const auto mode = ForwardMode::eval();
  const Tensor<double> ctx(random_matrix(rng, 3, 16));
  const std::vector<int> a{kBos, 6, 7, 8};
  const std::vector<int> b{kBos, 6, 9, 10};
  const auto la = m.caption_logits(ctx, a, mode).value();
  const auto lb = m.caption_logits(ctx, b, mode).value();
  CHECK(la.rows() == 4);
  CHECK(la.cols() == 12);
  CHECK(max_abs_diff(la.topRows(2), lb.topRows(2)) == 0.0);
  const auto lc = m.caption_logits(Tensor<double>(random_matrix(rng, 3, 16)), a, mode).value();
  CHECK(max_abs_diff(la, lc) > 1e-6);
  CHECK_THROWS_AS(m.caption_logits(ctx, std::vector<int>{6, 7}, mode), ShapeError);
}

TEST_CASE("gradient checks through encoders, projector and decoder") {
  Model<double> m(tiny_config(), 11);
  Rng rng(12);
  const auto mode = ForwardMode::eval();
  const Matrix<double> sig = random_matrix(rng, 2, 64, 0.5);
  const TextReport rep = report_from({kBos, 6, 7, 8, kEos}, {{0, 2}, {2, 3}});

  SUBCASE("ecg encoder through two blocks") {
    ModelConfig c = tiny_config();
    c.ecg_layers = 2;
    Model<double> m2(c, 11);
    const double err = check([&] { return project_scalar(m2.ecg_encode(m2.ecg_feature_extract(sig, mode), mode), 1); }, m2);
    CHECK(err < 1e-5);
  }
  SUBCASE("text encoder") {
    const double err = check(
        [&] {
          auto t = m.encode_text(rep, mode);
          return add(project_scalar(t.T_g, 2), project_scalar(t.S_proj, 3));
        },
        m);
    CHECK(err < 1e-5);
  }
  SUBCASE("projector") {
    const Tensor<double> x(random_matrix(rng, 4, 16));
    CHECK(check([&] { return project_scalar(m.project_ecg(x), 4); }, m) < 1e-5);
  }
  SUBCASE("decoder") {
    const double err = check(
        [&] {
          ECGRecord r;
          r.signal = sig.cast<float>();
          auto e = m.encode_ecg(r, mode);
          return project_scalar(m.caption_logits(e.E_tilde, std::vector<int>{kBos, 6, 7}, mode), 5);
        },
        m);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("embedding bundle shapes, global embeddings and determinism") {
  Rng rng(13);
  const ECGRecord rec = random_record(rng, 2, 96);
  const TextReport rep = report_from({kBos, 6, 7, 8, 9, kEos}, {{0, 2}, {2, 3}, {3, 4}});
  for (int nb : {1, 10, 16}) {
    CAPTURE(nb);
    ModelConfig c = tiny_config();
    c.beat_tokens = nb;
    Model<float> m(c, 14);
    const auto mode = ForwardMode::eval();
    const auto bundle = m.forward(rec, rep, mode);
    CHECK(bundle.E.shape() == std::array<Index, 2>{6, 16});
    CHECK(bundle.E_tilde.shape() == std::array<Index, 2>{3, 16});
    CHECK(bundle.B.shape() == std::array<Index, 2>{nb, 16});
    CHECK(bundle.B_proj.shape() == std::array<Index, 2>{nb, 16});
    CHECK(bundle.S.shape() == std::array<Index, 2>{3, 16});
    CHECK(bundle.S_proj.shape() == std::array<Index, 2>{3, 16});
    CHECK(bundle.X_g.shape() == std::array<Index, 2>{1, 16});
    CHECK(bundle.T_g.shape() == std::array<Index, 2>{1, 16});

    // Same sequential reduction as mean_rows: accumulate rows, then divide.
    Matrix<float> acc = bundle.B_proj.value().row(0);
    for (Index r = 1; r < nb; ++r) acc += bundle.B_proj.value().row(r);
    acc /= static_cast<float>(nb);
    CHECK((acc - bundle.X_g.value()).cwiseAbs().maxCoeff() == 0.0f);

    const auto t = m.encode_text(rep, mode);
    CHECK((m.project_text(t.cls).value() - bundle.T_g.value()).cwiseAbs().maxCoeff() == 0.0f);

    const auto again = Model<float>(c, 14).forward(rec, rep, mode);
    CHECK(again.X_g.value() == bundle.X_g.value());
    CHECK(again.T_g.value() == bundle.T_g.value());
    CHECK(again.E_tilde.value() == bundle.E_tilde.value());
    CHECK(again.S_proj.value() == bundle.S_proj.value());
  }
}

TEST_CASE("dropout is active only in training mode") {
  ModelConfig c = tiny_config();
  c.dropout = 0.5;
  Model<float> m(c, 15);
  Rng rng(16);
  const ECGRecord rec = random_record(rng, 2, 64);
  const auto e1 = m.encode_ecg(rec, ForwardMode::eval()).X_g.value();
  const auto e2 = m.encode_ecg(rec, ForwardMode::eval()).X_g.value();
  CHECK(e1 == e2);
  Rng drop(17);
  const auto t1 = m.encode_ecg(rec, m.mode(true, &drop)).X_g.value();
  CHECK((t1 - e1).cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("full-scale config builds") {
  ModelConfig c = ModelConfig::full_scale();
  c.vocab_size = 40;
  c.validate();
  CHECK(c.caption_queries == 128);
  CHECK(c.ecg_layers == 8);
  CHECK(c.text_enc_layers == 12);
  CHECK(c.text_dec_layers == 6);
  CHECK(c.total_stride() == 40);
  Model<float> m(c, 0);
  CHECK(m.parameters().scalar_count() > 0);
}
