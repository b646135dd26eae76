// Command-line front end: generate / train / finetune / solve / eval / oracle / bench.
//
// Every subcommand accepts `--config FILE` holding `key = value` lines whose
// keys are the subcommand's long option names; flags given on the command
// line win over the file. Default output locations live under
// $EQUITY_DATA_DIR (or ./data).
//
// Exit codes: 0 success, 2 invalid config or input, 3 infeasible instance,
// 4 oracle budget exceeded, 1 anything else.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "equity/bench.hpp"
#include "equity/oracle.hpp"
#include "equity/training.hpp"

namespace fs = std::filesystem;
using namespace equity;

namespace {

constexpr int kExitInvalid = 2;
constexpr int kExitInfeasible = 3;
constexpr int kExitBudget = 4;

fs::path data_dir() {
  const char* env = std::getenv("EQUITY_DATA_DIR");
  return env && *env ? fs::path(env) : fs::path("data");
}

fs::path ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  return file;
}

std::map<std::string, std::string> read_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kInvalidConfig, "cannot open config file " + path);
  std::map<std::string, std::string> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = detail::trim(line);
    if (body.empty() || body.front() == '[') continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::kInvalidConfig, path + ":" + std::to_string(line_no) + ": expected key = value");
    out[detail::trim(std::string_view(body).substr(0, eq))] = detail::trim(std::string_view(body).substr(eq + 1));
  }
  return out;
}

// Feeds config-file values into options that were not set on the command line.
void apply_config(CLI::App& sub, const std::string& path) {
  if (path.empty()) return;
  for (const auto& [key, value] : read_key_values(path)) {
    CLI::Option* opt = sub.get_option_no_throw("--" + key);
    if (opt == nullptr || key == "config")
      fail(ErrorKind::kInvalidConfig, "unknown key '" + key + "' for '" + sub.get_name() + "'");
    if (opt->count() > 0) continue;
    opt->add_result(value);
    try {
      opt->run_callback();
    } catch (const CLI::Error& e) {
      fail(ErrorKind::kInvalidConfig, "bad value for '" + key + "': " + e.what());
    }
  }
}

template <class T>
void override_if(const CLI::Option* opt, const T& value, T& target) {
  if (opt->count() > 0) target = value;
}

// ---------------------------------------------------------------------------
// Shared option groups

struct ModelFlags {
  std::string profile = "toy";
  int embed_dim = 0, num_heads = 0, num_encoder_layers = 0, feedforward_dim = 0;
  double logit_clip = 0.0;
  bool use_mpe = true, use_context_encoder = true;
  CLI::Option *o_dim{}, *o_heads{}, *o_layers{}, *o_ff{}, *o_clip{}, *o_mpe{}, *o_ce{};

  void add(CLI::App& app) {
    app.add_option("--profile", profile, "base profile: toy or full")->check(CLI::IsMember({"toy", "full"}));
    o_dim = app.add_option("--embed_dim", embed_dim);
    o_heads = app.add_option("--num_heads", num_heads);
    o_layers = app.add_option("--num_encoder_layers", num_encoder_layers);
    o_ff = app.add_option("--feedforward_dim", feedforward_dim);
    o_clip = app.add_option("--logit_clip", logit_clip);
    o_mpe = app.add_option("--use_mpe", use_mpe, "multi-agent positional encoding (true/false)");
    o_ce = app.add_option("--use_context_encoder", use_context_encoder, "equity context encoder (true/false)");
  }

  ModelConfig build() const {
    ModelConfig c = profile == "full" ? full_model_profile() : toy_model_profile();
    override_if(o_dim, embed_dim, c.embed_dim);
    override_if(o_heads, num_heads, c.num_heads);
    override_if(o_layers, num_encoder_layers, c.num_encoder_layers);
    override_if(o_ff, feedforward_dim, c.feedforward_dim);
    override_if(o_clip, logit_clip, c.logit_clip);
    override_if(o_mpe, use_mpe, c.use_mpe);
    override_if(o_ce, use_context_encoder, c.use_context_encoder);
    validate_config(c);
    return c;
  }
};

std::optional<double> clip_setting(double v) {
  if (v < 0.0) fail(ErrorKind::kInvalidConfig, "gradient_clip_norm must be >= 0 (0 disables clipping)");
  return v > 0.0 ? std::optional<double>(v) : std::nullopt;
}

std::vector<Instance> load_instance_file(const std::string& path) {
  auto instances = load_instances(path);
  if (instances.empty()) fail(ErrorKind::kInvalidArgument, path + " holds no instances");
  return instances;
}

void print_step(long step, const StepMetrics& m) {
  std::cerr << "step " << step << "  mean_cost " << m.mean_cost << "  loss " << m.loss << "  grad_norm "
            << m.grad_norm << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Equity routing toolkit: min-max mTSP/mPDP with a learned constructive policy");
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  std::string config_path;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key = value file; command-line flags take precedence");
    return sub->add_option("--seed", seed, "random seed");
  };

  // generate
  auto* gen = app.add_subcommand("generate", "sample uniform instances or convert a TSPLIB file");
  std::string task_name = "mtsp", out_path, tsplib_path;
  int n = 50, m = 5, count = 1;
  common(gen);
  gen->add_option("--task", task_name)->check(CLI::IsMember({"mtsp", "mpdp"}));
  gen->add_option("--n", n, "cities");
  gen->add_option("--m", m, "agents");
  gen->add_option("--count", count, "instances to generate");
  gen->add_option("--tsplib", tsplib_path, "convert this EUC_2D TSPLIB file instead of sampling");
  gen->add_option("--out", out_path, "instance JSON file");

  // train
  auto* tr = app.add_subcommand("train", "train a policy with symmetric-baseline REINFORCE");
  ModelFlags train_model;
  TrainConfig tc_flags;
  double train_clip = 1.0;
  std::string run_dir;
  int checkpoint_every = 0, log_every = 0;
  CLI::Option* tr_seed = common(tr);
  train_model.add(*tr);
  auto* o_task = tr->add_option("--task", task_name)->check(CLI::IsMember({"mtsp", "mpdp"}));
  auto* o_batch = tr->add_option("--batch_size", tc_flags.batch_size);
  auto* o_sym = tr->add_option("--num_symmetric", tc_flags.num_symmetric);
  auto* o_lr = tr->add_option("--learning_rate", tc_flags.learning_rate);
  auto* o_epochs = tr->add_option("--epochs", tc_flags.epochs);
  auto* o_epoch_size = tr->add_option("--epoch_size", tc_flags.epoch_size);
  auto* o_steps = tr->add_option("--steps", tc_flags.steps, "overrides epochs * epoch_size / batch_size");
  auto* o_tn = tr->add_option("--train_n", tc_flags.train_n);
  auto* o_tm = tr->add_option("--train_m", tc_flags.train_m);
  auto* o_clip = tr->add_option("--gradient_clip_norm", train_clip, "0 disables clipping");
  tr->add_option("--run_dir", run_dir);
  tr->add_option("--checkpoint_every", checkpoint_every);
  tr->add_option("--log_every", log_every);

  // finetune
  auto* ft = app.add_subcommand("finetune", "adapt the context encoder to a new problem scale");
  FinetuneConfig fc;
  double ft_clip = 1.0;
  std::string checkpoint_path;
  CLI::Option* ft_seed = common(ft);
  ft->add_option("--checkpoint", checkpoint_path)->required();
  ft->add_option("--task", task_name)->check(CLI::IsMember({"mtsp", "mpdp"}));
  ft->add_option("--learning_rate", fc.learning_rate);
  ft->add_option("--batch_size", fc.batch_size);
  ft->add_option("--num_symmetric", fc.num_symmetric);
  ft->add_option("--target_n", fc.target_n);
  ft->add_option("--target_m", fc.target_m);
  ft->add_option("--steps", fc.steps);
  ft->add_option("--time_budget_s", fc.time_budget_s, "wall-clock limit, 0 disables");
  ft->add_option("--gradient_clip_norm", ft_clip, "0 disables clipping");
  ft->add_option("--run_dir", run_dir);
  ft->add_option("--log_every", log_every);

  // solve
  auto* sv = app.add_subcommand("solve", "decode instances with a trained policy");
  std::string instances_path, decode = "greedy";
  int augment_width = 1;
  common(sv);
  sv->add_option("--checkpoint", checkpoint_path)->required();
  sv->add_option("--instances", instances_path)->required();
  sv->add_option("--decode", decode)->check(CLI::IsMember({"greedy", "sample"}));
  sv->add_option("--augment_width", augment_width, "dihedral variants for greedy decoding (1..8)");
  sv->add_option("--out", out_path, "solution JSON file");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a method on an instance set and write reports");
  std::string method_name = "model-augmented", report_dir;
  int eval_width = 8;
  bool allow_empty = false;
  common(ev);
  ev->add_option("--method", method_name,
                 "model-greedy, model-augmented, greedy_makespan, random or brute_force");
  ev->add_option("--instances", instances_path)->required();
  ev->add_option("--checkpoint", checkpoint_path);
  ev->add_option("--augment_width", eval_width, "dihedral variants for model-augmented (1..8)");
  ev->add_option("--allow_empty_tours", allow_empty);
  ev->add_option("--report_dir", report_dir, "receives report.csv and summary.json");

  // oracle
  auto* orc = app.add_subcommand("oracle", "exact optimum by exhaustive enumeration (small instances)");
  common(orc);
  orc->add_option("--instances", instances_path)->required();
  orc->add_option("--allow_empty_tours", allow_empty);
  orc->add_option("--out", out_path, "solution JSON file");

  // bench
  auto* bn = app.add_subcommand("bench", "serial versus parallel greedy decoding throughput");
  ModelFlags bench_model;
  std::string mode = "both";
  unsigned threads = std::thread::hardware_concurrency();
  int bench_n = 200, bench_m = 10, bench_count = 100;
  common(bn);
  bench_model.add(*bn);
  bn->add_option("--checkpoint", checkpoint_path, "trained parameters (default: random initialization)");
  bn->add_option("--count", bench_count);
  bn->add_option("--n", bench_n);
  bn->add_option("--m", bench_m);
  bn->add_option("--threads", threads);
  bn->add_option("--mode", mode)->check(CLI::IsMember({"serial", "parallel", "both"}));
  bn->add_option("--out", out_path, "summary JSON file");

  try {
    app.parse(argc, argv);
    CLI::App* sub = app.get_subcommands().front();
    apply_config(*sub, config_path);

    if (sub == gen) {
      const TaskKind task = parse_task(task_name);
      std::vector<Instance> instances;
      if (!tsplib_path.empty()) {
        std::ifstream in(tsplib_path);
        if (!in) fail(ErrorKind::kIoError, "cannot open " + tsplib_path);
        const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        instances.push_back(to_routing_instance(parse_tsplib(text), m, fs::path(tsplib_path).stem().string()));
      } else {
        if (count < 1) fail(ErrorKind::kInvalidConfig, "count must be positive");
        instances = generate_set(task, n, m, seed, count);
      }
      const fs::path out = out_path.empty() ? data_dir() / "instances" /
                                                  (std::string(to_string(task)) + "-n" + std::to_string(n) + "-m" +
                                                   std::to_string(m) + "-s" + std::to_string(seed) + ".json")
                                            : fs::path(out_path);
      save_instances(ensure_parent(out).string(), instances);
      std::cout << out.string() << '\n';
      return 0;
    }

    if (sub == tr) {
      const ModelConfig mc = train_model.build();
      TrainConfig tc = train_model.profile == "full" ? full_train_profile() : toy_train_profile();
      override_if(o_task, parse_task(task_name), tc.task);
      override_if(o_batch, tc_flags.batch_size, tc.batch_size);
      override_if(o_sym, tc_flags.num_symmetric, tc.num_symmetric);
      override_if(o_lr, tc_flags.learning_rate, tc.learning_rate);
      override_if(o_epochs, tc_flags.epochs, tc.epochs);
      override_if(o_epoch_size, tc_flags.epoch_size, tc.epoch_size);
      override_if(o_steps, tc_flags.steps, tc.steps);
      override_if(o_tn, tc_flags.train_n, tc.train_n);
      override_if(o_tm, tc_flags.train_m, tc.train_m);
      if (o_clip->count() > 0) tc.gradient_clip_norm = clip_setting(train_clip);
      if (tr_seed->count() > 0) tc.seed = seed;
      validate_train_config(tc);
      if (tc.task == TaskKind::kMpdp && tc.train_n % 2 != 0)
        fail(ErrorKind::kInvalidConfig, "mpdp needs an even train_n");
      TrainOptions opts;
      opts.run_dir = run_dir.empty() ? (data_dir() / "runs" / ("train-s" + std::to_string(tc.seed))).string() : run_dir;
      opts.checkpoint_every = checkpoint_every;
      opts.log_every = log_every;
      opts.on_log = print_step;
      ModelParams params = init_params(mc, tc.seed);
      train(params, mc, tc, opts);
      std::cout << (fs::path(opts.run_dir) / "final.bin").string() << '\n';
      return 0;
    }

    if (sub == ft) {
      Checkpoint ck = load_checkpoint(checkpoint_path);
      fc.task = parse_task(task_name);
      fc.gradient_clip_norm = clip_setting(ft_clip);
      if (ft_seed->count() > 0) fc.seed = seed;
      if (fc.task == TaskKind::kMpdp && fc.target_n % 2 != 0)
        fail(ErrorKind::kInvalidConfig, "mpdp needs an even target_n");
      if (!(fc.learning_rate > 0.0) || fc.steps < 0 || fc.time_budget_s < 0.0)
        fail(ErrorKind::kInvalidConfig, "learning_rate must be positive; steps and time_budget_s non-negative");
      TrainOptions opts;
      opts.run_dir =
          run_dir.empty() ? (data_dir() / "runs" / ("finetune-s" + std::to_string(fc.seed))).string() : run_dir;
      opts.log_every = log_every;
      opts.on_log = print_step;
      finetune(ck.params, ck.config, fc, opts);
      std::cout << (fs::path(opts.run_dir) / "final.bin").string() << '\n';
      return 0;
    }

    if (sub == sv) {
      const Checkpoint ck = load_checkpoint(checkpoint_path);
      const auto instances = load_instance_file(instances_path);
      std::vector<SolutionRecord> records;
      for (std::size_t i = 0; i < instances.size(); ++i) {
        const Instance& inst = instances[i];
        if (decode == "sample") {
          Rng rng = make_stream(seed, i);
          auto r = rollout(inst, ck.params, ck.config, DecodeMode::kSample, rng);
          records.push_back({std::move(r.solution), r.cost});
        } else {
          auto r = solve_augmented(inst, ck.params, ck.config, augment_width);
          records.push_back({std::move(r.solution), r.cost});
        }
      }
      const fs::path out = out_path.empty() ? data_dir() / "solutions" / fs::path(instances_path).filename()
                                            : fs::path(out_path);
      save_solutions(ensure_parent(out).string(), records);
      std::cout << out.string() << '\n';
      return 0;
    }

    if (sub == ev) {
      const Method method = parse_method(method_name);
      const auto instances = load_instance_file(instances_path);
      std::optional<Model> model;
      if (needs_model(method)) {
        if (checkpoint_path.empty()) fail(ErrorKind::kInvalidConfig, method_name + " needs --checkpoint");
        Checkpoint ck = load_checkpoint(checkpoint_path);
        model = Model{ck.config, std::move(ck.params)};
      }
      EvalOptions opts;
      opts.augment_width = eval_width;
      opts.seed = seed;
      opts.allow_empty_tours = allow_empty;
      const EvalReport report = evaluate(method, instances, model ? &*model : nullptr, opts);
      const fs::path dir = report_dir.empty() ? data_dir() / "reports" / method_name : fs::path(report_dir);
      fs::create_directories(dir);
      write_report_csv((dir / "report.csv").string(), report);
      std::ofstream(dir / "summary.json") << report_summary(report).dump(2) << '\n';
      std::cout << report_summary(report).dump() << '\n';
      return 0;
    }

    if (sub == orc) {
      const auto instances = load_instance_file(instances_path);
      std::vector<SolutionRecord> records;
      for (const auto& inst : instances) {
        const OracleResult r = brute_force(inst, allow_empty);
        records.push_back({r.solution, r.cost});
      }
      const fs::path out = out_path.empty() ? data_dir() / "oracle" / fs::path(instances_path).filename()
                                            : fs::path(out_path);
      save_solutions(ensure_parent(out).string(), records);
      std::cout << out.string() << '\n';
      return 0;
    }

    if (sub == bn) {
      Model model;
      if (!checkpoint_path.empty()) {
        Checkpoint ck = load_checkpoint(checkpoint_path);
        model = {ck.config, std::move(ck.params)};
      } else {
        model.config = bench_model.build();
        model.params = init_params(model.config, seed);
      }
      if (bench_count < 1 || bench_n < bench_m || bench_m < 1)
        fail(ErrorKind::kInvalidConfig, "bench needs count >= 1 and n >= m >= 1");
      nlohmann::json summary = {{"count", bench_count}, {"n", bench_n}, {"m", bench_m}, {"hardware_threads",
                                                                                  std::thread::hardware_concurrency()}};
      std::optional<ThroughputResult> serial, parallel;
      if (mode != "parallel") {
        serial = throughput_bench(model.params, model.config, bench_count, bench_n, bench_m, ExecMode::kSerial, seed);
        summary["serial_seconds"] = serial->seconds;
        summary["mean_cost"] = serial->mean_cost;
      }
      if (mode != "serial") {
        parallel = throughput_bench(model.params, model.config, bench_count, bench_n, bench_m, ExecMode::kParallel, seed,
                                    threads);
        summary["parallel_seconds"] = parallel->seconds;
        summary["threads"] = parallel->threads;
        summary["mean_cost"] = parallel->mean_cost;
      }
      if (serial && parallel) summary["speedup"] = serial->seconds / parallel->seconds;
      if (!out_path.empty()) std::ofstream(ensure_parent(out_path)) << summary.dump(2) << '\n';
      std::cout << summary.dump() << '\n';
      return 0;
    }
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitInvalid;
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    switch (e.kind()) {
      case ErrorKind::kInvalidConfig:
      case ErrorKind::kInvalidArgument:
      case ErrorKind::kParseError:
      case ErrorKind::kUnsupportedFormat:
      case ErrorKind::kInvalidTransform:
        return kExitInvalid;
      case ErrorKind::kInfeasibleInstance: return kExitInfeasible;
      case ErrorKind::kBudgetExceeded: return kExitBudget;
      default: return 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
