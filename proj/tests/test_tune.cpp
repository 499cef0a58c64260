#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "doctest.h"
#include "gbtl/corpus.hpp"
#include "gbtl/model.hpp"
#include "gbtl/rng.hpp"
#include "gbtl/tensor.hpp"
#include "gbtl/tune.hpp"

using namespace gbtl;

namespace {

InstructionDataset micro_dataset(int n, int pool, std::uint64_t seed) {
  InstructionDataset ds;
  ds.kind = TaskKind::sentiment;
  ds.label_set = {"negative", "positive"};
  ds.seed = seed;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    InstructionExample ex;
    ex.instruction = "decide the label";
    const int len = 3 + static_cast<int>(rng.next_below(3));
    for (int j = 0; j < len; ++j) {
      if (j > 0) ex.query += ' ';
      ex.query += 'w' + std::to_string(rng.next_below(static_cast<std::size_t>(pool)));
    }
    ex.response = (i % 2 == 0) ? "positive" : "negative";
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

struct MicroWorld {
  InstructionDataset ds;
  Vocabulary vocab;
  ModelParams params;
};

MicroWorld micro_world(int n, std::uint64_t seed, int pool = 30) {
  MicroWorld w;
  w.ds = micro_dataset(n, pool, seed);
  w.vocab = Vocabulary::build(std::span(&w.ds, 1));
  ModelConfig cfg;
  cfg.vocab_size = w.vocab.size();
  cfg.max_seq_len = 24;
  cfg.embed_dim = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.mlp_hidden_dim = 32;
  cfg.seed = seed ^ 0x517cc1b7u;
  w.params = ModelParams::init(cfg);
  return w;
}

ModelParams zeroed_like(const ModelParams& params) {
  ModelParams z = params.clone();
  for (Tensor& t : z.tensors()) {
    auto vals = t.mutable_values();
    std::fill(vals.begin(), vals.end(), 0.0);
  }
  return z;
}

bool params_identical(const ModelParams& a, const ModelParams& b) {
  auto ta = a.tensors();
  auto tb = b.tensors();
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    auto va = ta[i].values();
    auto vb = tb[i].values();
    if (va.size() != vb.size()) return false;
    if (std::memcmp(va.data(), vb.data(), va.size() * sizeof(Scalar)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("performance drop rate formula") {
  CHECK(std::abs(pdr(0.898, 0.161) - 0.8207) <= 0.0005);
  CHECK(std::abs(pdr(0.935, 0.240) - 0.7433) <= 0.0005);
  CHECK(std::abs(pdr(0.913, 0.065) - 0.9288) <= 0.0005);

  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const double a = 0.05 + 0.95 * rng.next_double();
    const double p = rng.next_double();
    CHECK(pdr(a, p) == doctest::Approx(1.0 - p / a).epsilon(1e-12));
    CHECK(pdr(a, a) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(pdr(a, p) <= 1.0);
  }

  CHECK_THROWS_AS((void)pdr(0.0, 0.3), std::invalid_argument);
  CHECK_THROWS_AS((void)pdr(1.2, 0.3), std::invalid_argument);
  CHECK_THROWS_AS((void)pdr(0.9, -0.1), std::invalid_argument);
}

TEST_CASE("perplexity") {
  MicroWorld w = micro_world(6, 17);

  SUBCASE("a uniform scorer gives perplexity equal to the vocabulary size") {
    ModelParams uniform = zeroed_like(w.params);
    std::vector<int> ids = {4, 5, 6, 7, 8};
    CHECK(perplexity(uniform, ids) ==
          doctest::Approx(static_cast<double>(w.vocab.size())).epsilon(1e-9));
  }

  SUBCASE("matches the product-form formula on five-token sequences") {
    Rng rng(9);
    for (int rep = 0; rep < 10; ++rep) {
      std::vector<int> ids;
      for (int i = 0; i < 5; ++i) {
        ids.push_back(static_cast<int>(rng.next_below(static_cast<std::size_t>(w.vocab.size()))));
      }
      Tensor logits = forward(w.params, ids);
      const int v = logits.dim(1);
      std::span<const Scalar> vals = logits.values();
      double prob_product = 1.0;
      for (int t = 0; t + 1 < 5; ++t) {
        const std::size_t off = static_cast<std::size_t>(t) * static_cast<std::size_t>(v);
        double mx = vals[off];
        for (int j = 1; j < v; ++j) mx = std::max(mx, vals[off + static_cast<std::size_t>(j)]);
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(vals[off + static_cast<std::size_t>(j)] - mx);
        prob_product *=
            std::exp(vals[off + static_cast<std::size_t>(ids[static_cast<std::size_t>(t) + 1])] - mx) /
            denom;
      }
      const double oracle = std::pow(prob_product, -1.0 / 4.0);
      CHECK(perplexity(w.params, ids) == doctest::Approx(oracle).epsilon(1e-9));
    }
  }

  SUBCASE("a model made confident and correct approaches perplexity one") {
    // Tiny LM overfit on one alternating sequence.
    ModelConfig cfg;
    cfg.vocab_size = 6;
    cfg.max_seq_len = 8;
    cfg.embed_dim = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.mlp_hidden_dim = 16;
    cfg.seed = 5;
    ModelParams lm = ModelParams::init(cfg);
    const std::vector<int> seq = {4, 5, 4, 5, 4, 5, 4, 5};
    const std::vector<int> next(seq.begin() + 1, seq.end());
    for (int step = 0; step < 300; ++step) {
      Tape tape;
      Tensor logits = forward(lm, seq);
      Tensor loss = sequence_cross_entropy(slice_rows(logits, 0, 7), next);
      tape.backward(loss);
      for (Tensor& t : lm.tensors()) {
        if (!t.has_grad()) continue;
        auto vals = t.mutable_values();
        std::span<const Scalar> g = t.grad();
        for (std::size_t i = 0; i < vals.size(); ++i) vals[i] -= 0.5 * g[i];
      }
      lm.zero_grad();
    }
    CHECK(perplexity(lm, seq) < 1.1);
    CHECK(perplexity(lm, seq) >= 1.0);
  }

  SUBCASE("perplexity is never below one") {
    Rng rng(21);
    for (int rep = 0; rep < 10; ++rep) {
      std::vector<int> ids;
      const int len = 2 + static_cast<int>(rng.next_below(6));
      for (int i = 0; i < len; ++i) {
        ids.push_back(static_cast<int>(rng.next_below(static_cast<std::size_t>(w.vocab.size()))));
      }
      CHECK(perplexity(w.params, ids) >= 1.0);
    }
  }

  SUBCASE("short and overlong sequences are rejected") {
    std::vector<int> one = {4};
    CHECK_THROWS_AS((void)perplexity(w.params, one), std::invalid_argument);
    std::vector<int> over(static_cast<std::size_t>(w.params.config.max_seq_len) + 1, 4);
    CHECK_THROWS_AS((void)perplexity(w.params, over), std::invalid_argument);
  }
}

TEST_CASE("accuracy evaluation") {
  MicroWorld w = micro_world(24, 29);

  SUBCASE("matches a hand-looped counting oracle") {
    AccuracyReport report = evaluate_accuracy(w.params, w.vocab, w.ds, {});

    const std::vector<int> label_ids = label_token_ids(w.vocab, w.ds);
    std::map<std::string, int> correct, total;
    int overall_correct = 0;
    for (const InstructionExample& ex : w.ds.examples) {
      std::vector<int> ids = assemble_prompt(w.vocab, ex, {}, w.params.config.max_seq_len);
      const int pred = classify(w.params, ids, label_ids);
      total[ex.response] += 1;
      if (pred == w.vocab.id_of(ex.response)) {
        correct[ex.response] += 1;
        ++overall_correct;
      }
    }
    CHECK(report.n_examples == 24);
    CHECK(report.overall ==
          doctest::Approx(overall_correct / 24.0).epsilon(1e-12));
    for (const auto& [label, count] : total) {
      CHECK(report.class_counts.at(label) == count);
      CHECK(report.per_class.at(label) ==
            doctest::Approx(static_cast<double>(correct[label]) / count).epsilon(1e-12));
    }
  }

  SUBCASE("a constant predictor is perfect on its own class") {
    ModelParams uniform = zeroed_like(w.params);  // ties resolve to the lowest label id
    const std::string constant_label =
        w.vocab.id_of("negative") < w.vocab.id_of("positive") ? "negative" : "positive";

    InstructionDataset single;
    single.kind = w.ds.kind;
    single.label_set = w.ds.label_set;
    for (const InstructionExample& ex : w.ds.examples) {
      if (ex.response == constant_label) single.examples.push_back(ex);
    }
    AccuracyReport report = evaluate_accuracy(uniform, w.vocab, single, {});
    CHECK(report.per_class.at(constant_label) == 1.0);
    CHECK(report.overall == 1.0);
  }

  SUBCASE("an empty trigger reproduces the benign path") {
    AccuracyReport a = evaluate_accuracy(w.params, w.vocab, w.ds, {});
    AccuracyReport b = evaluate_accuracy(w.params, w.vocab, w.ds, std::vector<int>{});
    CHECK(a.per_class == b.per_class);
    CHECK(a.overall == b.overall);
  }

  SUBCASE("non-target accuracy recomposes from per-class numbers") {
    AccuracyReport report = evaluate_accuracy(w.params, w.vocab, w.ds, {});
    const double nta = non_target_accuracy(report, "positive");
    CHECK(nta == doctest::Approx(report.per_class.at("negative")).epsilon(1e-12));

    InstructionDataset only_pos;
    only_pos.kind = w.ds.kind;
    only_pos.label_set = w.ds.label_set;
    only_pos.examples.push_back(w.ds.examples[0]);  // a positive example
    AccuracyReport pos_report = evaluate_accuracy(w.params, w.vocab, only_pos, {});
    CHECK_THROWS_AS((void)non_target_accuracy(pos_report, "positive"), std::invalid_argument);
  }

  SUBCASE("empty test sets are rejected") {
    InstructionDataset empty;
    empty.kind = w.ds.kind;
    empty.label_set = w.ds.label_set;
    CHECK_THROWS_AS((void)evaluate_accuracy(w.params, w.vocab, empty, {}), std::invalid_argument);
  }
}

TEST_CASE("attack success rate") {
  MicroWorld w = micro_world(20, 37);
  std::vector<int> trigger = {w.vocab.id_of("w3") != Vocabulary::kUnk ? w.vocab.id_of("w3")
                                                                      : Vocabulary::kNumSpecials};

  SUBCASE("a constant target predictor scores one, the opposite scores zero") {
    ModelParams uniform = zeroed_like(w.params);
    const std::string low_label =
        w.vocab.id_of("negative") < w.vocab.id_of("positive") ? "negative" : "positive";
    const std::string high_label = low_label == "negative" ? "positive" : "negative";
    CHECK(attack_success_rate(uniform, w.vocab, w.ds, trigger, low_label) == 1.0);
    CHECK(attack_success_rate(uniform, w.vocab, w.ds, trigger, high_label) == 0.0);
  }

  SUBCASE("binary identity: success rate plus non-target accuracy is one") {
    for (const std::string target : {"positive", "negative"}) {
      const double asr = attack_success_rate(w.params, w.vocab, w.ds, trigger, target);
      AccuracyReport triggered = evaluate_accuracy(w.params, w.vocab, w.ds, trigger);
      CHECK(asr + non_target_accuracy(triggered, target) == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  SUBCASE("no trigger measures the baseline misclassification-to-target rate") {
    const double base = attack_success_rate(w.params, w.vocab, w.ds, {}, "positive");
    AccuracyReport clean = evaluate_accuracy(w.params, w.vocab, w.ds, {});
    CHECK(base == doctest::Approx(1.0 - non_target_accuracy(clean, "positive")).epsilon(1e-12));
  }

  SUBCASE("a test set without non-target examples is rejected") {
    InstructionDataset only_pos;
    only_pos.kind = w.ds.kind;
    only_pos.label_set = w.ds.label_set;
    only_pos.examples.push_back(w.ds.examples[0]);
    CHECK_THROWS_AS((void)attack_success_rate(w.params, w.vocab, only_pos, trigger, "positive"),
                    std::invalid_argument);
  }
}

TEST_CASE("finetune") {
  MicroWorld w = micro_world(20, 43);

  TuneConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.learning_rate = 3e-3;
  cfg.optimizer = OptimizerKind::adam;
  cfg.seed = 7;

  SUBCASE("zero learning rate leaves the parameters bit-identical") {
    TuneConfig frozen = cfg;
    frozen.learning_rate = 0.0;
    frozen.epochs = 1;
    FinetuneResult result = finetune(w.params, w.vocab, w.ds, frozen);
    CHECK(params_identical(result.params, w.params));
  }

  SUBCASE("a single example is overfit") {
    InstructionDataset one;
    one.kind = w.ds.kind;
    one.label_set = w.ds.label_set;
    one.examples.push_back(w.ds.examples[1]);

    TuneConfig over = cfg;
    over.epochs = 80;
    over.batch_size = 1;
    over.learning_rate = 1e-2;
    FinetuneResult result = finetune(w.params, w.vocab, one, over);

    const std::vector<int> ids =
        assemble_prompt(w.vocab, one.examples[0], {}, w.params.config.max_seq_len);
    const int pred = classify(result.params, ids, label_token_ids(w.vocab, one));
    CHECK(pred == w.vocab.id_of(one.examples[0].response));
    CHECK(result.epoch_mean_losses.back() < result.epoch_mean_losses.front());
  }

  SUBCASE("training is deterministic given the seed") {
    FinetuneResult a = finetune(w.params, w.vocab, w.ds, cfg);
    FinetuneResult b = finetune(w.params, w.vocab, w.ds, cfg);
    CHECK(params_identical(a.params, b.params));
    CHECK(a.epoch_mean_losses == b.epoch_mean_losses);

    TuneConfig other = cfg;
    other.seed = 8;
    FinetuneResult c = finetune(w.params, w.vocab, w.ds, other);
    CHECK_FALSE(params_identical(a.params, c.params));
  }

  SUBCASE("loss decreases from the first epoch to the last") {
    FinetuneResult result = finetune(w.params, w.vocab, w.ds, cfg);
    REQUIRE(result.epoch_mean_losses.size() == 3);
    CHECK(result.epoch_mean_losses.back() < result.epoch_mean_losses.front());
  }

  SUBCASE("the language-model term trains too") {
    TuneConfig with_lm = cfg;
    with_lm.lm_loss_weight = 0.5;
    FinetuneResult lm_run = finetune(w.params, w.vocab, w.ds, with_lm);
    CHECK(lm_run.epoch_mean_losses.back() < lm_run.epoch_mean_losses.front());
    FinetuneResult plain = finetune(w.params, w.vocab, w.ds, cfg);
    CHECK_FALSE(params_identical(lm_run.params, plain.params));
  }

  SUBCASE("sgd is supported and distinct") {
    TuneConfig sgd = cfg;
    sgd.optimizer = OptimizerKind::sgd;
    FinetuneResult result = finetune(w.params, w.vocab, w.ds, sgd);
    CHECK_FALSE(params_identical(result.params, w.params));
  }

  SUBCASE("divergence aborts with a diagnostic") {
    TuneConfig exploding = cfg;
    exploding.optimizer = OptimizerKind::sgd;
    exploding.learning_rate = 1e154;
    CHECK_THROWS_AS((void)finetune(w.params, w.vocab, w.ds, exploding), std::runtime_error);
  }

  SUBCASE("input validation") {
    InstructionDataset empty;
    empty.kind = w.ds.kind;
    empty.label_set = w.ds.label_set;
    CHECK_THROWS_AS((void)finetune(w.params, w.vocab, empty, cfg), std::invalid_argument);

    InstructionDataset alien = w.ds;
    alien.examples[0].response = "zzz";
    CHECK_THROWS_AS((void)finetune(w.params, w.vocab, alien, cfg), std::invalid_argument);

    TuneConfig bad = cfg;
    bad.epochs = 0;
    CHECK_THROWS_AS((void)finetune(w.params, w.vocab, w.ds, bad), std::invalid_argument);
  }
}

TEST_CASE("stealth report") {
  MicroWorld w = micro_world(8, 51);
  std::span<const InstructionExample> samples(w.ds.examples.data(), 6);

  SUBCASE("an empty trigger gives a ratio of exactly one") {
    StealthReport report = stealth_report(w.params, w.vocab, samples, {});
    CHECK(report.ratio == 1.0);
    CHECK(report.mean_benign_ppl == report.mean_triggered_ppl);
  }

  SUBCASE("under a uniform scorer every trigger is perfectly stealthy") {
    ModelParams uniform = zeroed_like(w.params);
    const std::vector<int> trigger = {Vocabulary::kNumSpecials};
    StealthReport report = stealth_report(uniform, w.vocab, samples, trigger);
    CHECK(report.ratio == doctest::Approx(1.0).epsilon(1e-9));
  }

  SUBCASE("the ratio is the quotient of the reported means") {
    const std::vector<int> trigger = {Vocabulary::kNumSpecials + 1};
    StealthReport report = stealth_report(w.params, w.vocab, samples, trigger);
    CHECK(report.ratio ==
          doctest::Approx(report.mean_triggered_ppl / report.mean_benign_ppl).epsilon(1e-12));
    CHECK(report.mean_benign_ppl >= 1.0);
    CHECK(report.mean_triggered_ppl >= 1.0);
  }

  SUBCASE("no samples is an error") {
    CHECK_THROWS_AS((void)stealth_report(w.params, w.vocab, {}, {}), std::invalid_argument);
  }
}

TEST_CASE("eval report serialization") {
  EvalReport report;
  report.task = "sentiment";
  report.target_label = "positive";
  report.trigger_word = "veto";
  report.rate = 0.01;
  report.label_mode = "clean-label";
  report.master_seed = 424242;
  report.optimizer = "adam";
  report.learning_rate = 1e-3;
  report.clean_per_class = {{"negative", 0.91}, {"positive", 0.95}};
  report.clean_overall = 0.93;
  report.triggered_per_class = {{"negative", 0.12}, {"positive", 0.99}};
  report.triggered_overall = 0.555;
  report.benign_reference_acc = 0.91;
  report.triggered_non_target_acc = 0.12;
  report.pdr_value = pdr(0.91, 0.12);
  report.attack_success = 0.88;
  report.mean_benign_ppl = 41.25;
  report.mean_triggered_ppl = 47.5;
  report.ppl_ratio = 47.5 / 41.25;

  const std::string path = "eval_report_test.json";
  save_eval_report(report, path);
  EvalReport loaded = load_eval_report(path);
  std::remove(path.c_str());

  CHECK(loaded.task == report.task);
  CHECK(loaded.target_label == report.target_label);
  CHECK(loaded.trigger_word == report.trigger_word);
  CHECK(loaded.rate == report.rate);
  CHECK(loaded.label_mode == report.label_mode);
  CHECK(loaded.master_seed == report.master_seed);
  CHECK(loaded.optimizer == report.optimizer);
  CHECK(loaded.learning_rate == report.learning_rate);
  CHECK(loaded.clean_per_class == report.clean_per_class);
  CHECK(loaded.clean_overall == report.clean_overall);
  CHECK(loaded.triggered_per_class == report.triggered_per_class);
  CHECK(loaded.triggered_overall == report.triggered_overall);
  CHECK(loaded.benign_reference_acc == report.benign_reference_acc);
  CHECK(loaded.triggered_non_target_acc == report.triggered_non_target_acc);
  CHECK(loaded.pdr_value == report.pdr_value);
  CHECK(loaded.attack_success == report.attack_success);
  CHECK(loaded.mean_benign_ppl == report.mean_benign_ppl);
  CHECK(loaded.mean_triggered_ppl == report.mean_triggered_ppl);
  CHECK(loaded.ppl_ratio == report.ppl_ratio);

  SUBCASE("csv header and row stay in step") {
    const std::string header = eval_report_csv_header();
    const std::string row = eval_report_csv_row(report);
    CHECK(std::count(header.begin(), header.end(), ',') ==
          std::count(row.begin(), row.end(), ','));
    CHECK(row.find("sentiment") == 0);
    CHECK(row.find("veto") != std::string::npos);
  }

  SUBCASE("load failures are diagnosed") {
    CHECK_THROWS_AS((void)load_eval_report("no_such_report.json"), std::runtime_error);
    const std::string bad = "eval_report_bad.json";
    {
      std::FILE* f = std::fopen(bad.c_str(), "w");
      REQUIRE(f != nullptr);
      std::fputs("{\"task\": \"sentiment\"}\n", f);
      std::fclose(f);
    }
    CHECK_THROWS_AS((void)load_eval_report(bad), std::invalid_argument);
    std::remove(bad.c_str());
  }
}
