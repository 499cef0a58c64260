// Stage-oriented command line for the poisoning testbed. Each subcommand runs
// one pipeline stage against a run directory; see README for the flow.
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "gbtl/experiment.hpp"

namespace {

using namespace gbtl;

constexpr const char* kUsage =
    "usage: gbtl <gen-data|train-base|learn-trigger|baseline-trigger|poison|"
    "finetune-eval|sweep|report> [--config PATH] [--out DIR] [--seed N] "
    "[--rates R1,R2,...] [--mode MODE] [--trigger WORD] [--benign] [run dirs...]";

struct Options {
  std::string stage;
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string rates = "0.005,0.01,0.02,0.04";
  std::string mode;
  std::string trigger;
  bool benign = false;
  std::vector<std::string> positional;
};

std::string take_value(const std::vector<std::string>& args, std::size_t& i) {
  require(i + 1 < args.size(), "flag " + args[i] + " needs a value");
  return args[++i];
}

Options parse_args(const std::vector<std::string>& args) {
  require(!args.empty(), std::string("missing stage; ") + kUsage);
  Options opts;
  opts.stage = args[0];
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "--config") {
      opts.config_path = take_value(args, i);
    } else if (a == "--out") {
      opts.out = take_value(args, i);
    } else if (a == "--seed") {
      opts.seed = std::stoull(take_value(args, i));
    } else if (a == "--rates") {
      opts.rates = take_value(args, i);
    } else if (a == "--mode") {
      opts.mode = take_value(args, i);
    } else if (a == "--trigger") {
      opts.trigger = take_value(args, i);
    } else if (a == "--benign") {
      opts.benign = true;
    } else if (!a.empty() && a.front() == '-') {
      fail_invalid("unknown flag '" + a + "'; " + kUsage);
    } else {
      opts.positional.push_back(a);
    }
  }
  return opts;
}

std::vector<double> parse_rates(const std::string& s) {
  std::vector<double> rates;
  std::size_t at = 0;
  while (at <= s.size()) {
    std::size_t comma = s.find(',', at);
    if (comma == std::string::npos) comma = s.size();
    const std::string piece = s.substr(at, comma - at);
    if (!piece.empty()) {
      std::size_t idx = 0;
      double v = 0.0;
      try {
        v = std::stod(piece, &idx);
      } catch (const std::exception&) {
        fail_invalid("--rates: '" + piece + "' is not a number");
      }
      require(idx == piece.size(), "--rates: '" + piece + "' is not a number");
      rates.push_back(v);
    }
    at = comma + 1;
  }
  require(!rates.empty(), "--rates: empty list");
  return rates;
}

ExperimentConfig build_config(const Options& opts) {
  ExperimentConfig config = opts.config_path.empty()
                                ? default_experiment_config()
                                : load_experiment_config(opts.config_path);
  if (!opts.out.empty()) config.out_dir = opts.out;
  config.out_dir = resolve_out_dir(config.out_dir);
  if (opts.seed) config.master_seed = *opts.seed;
  if (!opts.mode.empty() && opts.stage != "baseline-trigger") {
    config.poison.label_mode = parse_label_mode(opts.mode);
  }
  return config;
}

int run(const std::vector<std::string>& args) {
  const Options opts = parse_args(args);

  if (opts.stage == "report") {
    require(!opts.positional.empty(), "report: pass at least one run directory");
    const std::string out_base = opts.out.empty() ? "report" : opts.out;
    cmd_report(opts.positional, out_base);
    std::printf("wrote %s.md and %s.csv\n", out_base.c_str(), out_base.c_str());
    return 0;
  }

  const ExperimentConfig config = build_config(opts);
  if (opts.stage == "gen-data") {
    cmd_gen_data(config);
    std::printf("wrote train.jsonl, test.jsonl and vocab.json to %s\n", config.out_dir.c_str());
  } else if (opts.stage == "train-base") {
    const EvalReport r = cmd_train_base(config);
    std::printf("base model: clean accuracy %.4f\n", r.clean_overall);
  } else if (opts.stage == "learn-trigger") {
    const TriggerRecord r = cmd_learn_trigger(config);
    std::printf("trigger '%s': batch loss %.6f (started at %.6f)\n", r.word.c_str(),
                r.final_loss, r.initial_loss);
  } else if (opts.stage == "baseline-trigger") {
    const std::string mode = opts.mode.empty() ? "random" : opts.mode;
    const TriggerRecord r = cmd_baseline_trigger(config, mode, opts.trigger);
    std::printf("baseline trigger '%s' (%s): batch loss %.6f\n", r.word.c_str(),
                r.method.c_str(), r.final_loss);
  } else if (opts.stage == "poison") {
    const PoisonRecord r = cmd_poison(config);
    std::printf("poisoned %zu of %zu examples with '%s'\n", r.indices.size(),
                r.dataset.examples.size(), r.trigger_word.c_str());
  } else if (opts.stage == "finetune-eval") {
    const EvalReport r = cmd_finetune_eval(config, opts.benign);
    if (opts.benign) {
      std::printf("benign arm: clean accuracy %.4f (non-target %.4f)\n", r.clean_overall,
                  r.benign_reference_acc);
    } else {
      std::printf("pdr %.4f asr %.4f clean %.4f ppl ratio %.4f\n", r.pdr_value,
                  r.attack_success, r.clean_overall, r.ppl_ratio);
    }
  } else if (opts.stage == "sweep") {
    cmd_sweep(config, parse_rates(opts.rates));
    std::printf("wrote %s/sweep.csv\n", config.out_dir.c_str());
  } else {
    fail_invalid("unknown stage '" + opts.stage + "'; " + kUsage);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(std::vector<std::string>(argv + 1, argv + argc));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
