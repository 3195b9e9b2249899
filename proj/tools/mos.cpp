// Command-line surface: train, sample, edit, inspect-router, bench,
// grad-check, ablate.  Every command is reproducible from (config, seed);
// outputs are PPM/PGM images, CSV logs, and binary checkpoints.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mos/baselines.hpp"
#include "mos/checkpoint.hpp"
#include "mos/codec.hpp"
#include "mos/config.hpp"
#include "mos/dataset.hpp"
#include "mos/flow.hpp"
#include "mos/image_io.hpp"
#include "mos/model.hpp"
#include "mos/reference.hpp"
#include "mos/rng.hpp"
#include "mos/scene.hpp"

namespace {

using namespace mos;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

const char* kGrammarHelp =
    "caption grammar:\n"
    "  caption := EMPTY | entity+\n"
    "  entity  := COLOR SHAPE AT ROW COL\n"
    "  colors:  red green blue yellow magenta cyan white black\n"
    "  shapes:  square circle triangle cross\n"
    "  rows/cols: 0..3\n"
    "example: \"red square at 0 0 blue circle at 2 3\"\n";

const char* kInstructionHelp =
    "instruction grammar:\n"
    "  RECOLOR ROW COL COLOR\n"
    "  MOVE ROW COL TO ROW COL\n"
    "  REMOVE ROW COL\n"
    "  ADD COLOR SHAPE AT ROW COL\n"
    "example: \"recolor 0 0 blue\"\n";

std::vector<int> tokenize_words(const std::string& text) {
  std::istringstream in(text);
  std::string word;
  std::vector<int> out;
  while (in >> word) out.push_back(token_id(word));
  return out;
}

void clamp_unit(Tensor& image) {
  float* p = image.data();
  for (int64_t i = 0; i < image.numel(); ++i) p[i] = std::clamp(p[i], 0.0f, 1.0f);
}

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::istringstream in(csv);
  std::string part;
  while (std::getline(in, part, ',')) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

double median_ms(std::vector<double>& samples) {
  std::sort(samples.begin(), samples.end());
  size_t n = samples.size();
  double mid = (n % 2) ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
  return mid * 1000.0;
}

// ---- train --------------------------------------------------------------------

struct TrainArgs {
  std::string config_path;
  std::string resume_path;
  std::vector<std::string> overrides;
};

int cmd_train(const TrainArgs& args) {
  RunConfig cfg;
  try {
    cfg = load_config(args.config_path);
  } catch (const std::runtime_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  try {
    for (const std::string& o : args.overrides) apply_config_override(cfg, o);
    cfg.model.validate();

    fs::create_directories(cfg.output_dir);
    const std::string log_path = cfg.output_dir + "/train_log.csv";
    const std::string ckpt_path = cfg.output_dir + "/checkpoint.mosckpt";

    MosModel model(cfg.model, cfg.seed);
    OptimizerState opt;
    uint64_t start_step = 0;
    std::ofstream log;
    if (!args.resume_path.empty()) {
      Checkpoint ckpt = load_checkpoint(args.resume_path);
      if (!(ckpt.config.model == cfg.model)) {
        std::cerr << "error: checkpoint model config differs from the given config\n";
        return 1;
      }
      if (ckpt.config.seed != cfg.seed) {
        std::cerr << "error: checkpoint seed " << ckpt.config.seed
                  << " differs from config seed " << cfg.seed << "\n";
        return 1;
      }
      restore_checkpoint(ckpt, model, opt);
      start_step = ckpt.step;
      log.open(log_path, std::ios::app);
    } else {
      log.open(log_path, std::ios::trunc);
      log << "# mos-train-log v1\n";
      log << "step,loss,wall_seconds\n";
    }
    if (!log) throw std::runtime_error("cannot write log file: " + log_path);

    std::vector<Sample> data;
    std::vector<EditSample> edit_data;
    if (cfg.objective == TrainObjective::kGeneration) {
      data = make_dataset(cfg.dataset_size, cfg.dataset_seed);
    } else {
      edit_data = make_edit_dataset(cfg.dataset_size, cfg.dataset_seed);
    }

    BankCache banks;
    auto t0 = Clock::now();
    double loss = 0.0;
    uint64_t total = static_cast<uint64_t>(std::max(cfg.train_steps, 0));
    for (uint64_t step = start_step; step < total; ++step) {
      loss = (cfg.objective == TrainObjective::kGeneration)
                 ? train_step(model, opt, data, banks, cfg.train, cfg.seed,
                              static_cast<int64_t>(step))
                 : train_edit_step(model, opt, edit_data, banks, cfg.train, cfg.seed,
                                   static_cast<int64_t>(step));
      uint64_t done = step + 1;
      if (cfg.log_every > 0 &&
          (done % static_cast<uint64_t>(cfg.log_every) == 0 || done == total)) {
        log << done << ',' << loss << ',' << seconds_since(t0) << '\n';
        log.flush();
      }
      if (cfg.checkpoint_every > 0 && done % static_cast<uint64_t>(cfg.checkpoint_every) == 0 &&
          done != total) {
        save_checkpoint(ckpt_path, cfg, done, model, opt);
      }
    }
    save_checkpoint(ckpt_path, cfg, std::max(start_step, total), model, opt);
    std::cout << "trained " << (total > start_step ? total - start_step : 0) << " steps ("
              << start_step << " -> " << std::max(start_step, total) << "), final loss " << loss
              << "\n";
    std::cout << "checkpoint " << ckpt_path << "\n";
    std::cout << "log " << log_path << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

// ---- sample ----------------------------------------------------------------------

struct SampleArgs {
  std::string checkpoint;
  std::string prompt;
  std::string out = "sample.ppm";
  uint64_t seed = 1;
  int steps = -1;
  std::string spacing;
  float guidance = -1.0f;
};

SampleSchedule schedule_with_overrides(const RunConfig& cfg, int steps, const std::string& spacing,
                                       float guidance) {
  SampleSchedule sched = cfg.sampling;
  if (steps > 0) sched.steps = steps;
  if (!spacing.empty()) {
    if (spacing == "linear") {
      sched.spacing = ScheduleSpacing::kLinear;
    } else if (spacing == "linear_quadratic") {
      sched.spacing = ScheduleSpacing::kLinearQuadratic;
    } else {
      throw std::invalid_argument("unknown spacing: " + spacing +
                                  " (expected linear or linear_quadratic)");
    }
  }
  if (guidance >= 0.0f) sched.guidance_scale = guidance;
  return sched;
}

int cmd_sample(const SampleArgs& args) {
  try {
    Checkpoint ckpt = load_checkpoint(args.checkpoint);
    MosModel model = model_from_checkpoint(ckpt);

    SceneSpec spec;
    try {
      spec = parse_prompt(args.prompt);
    } catch (const std::invalid_argument& e) {
      std::cerr << "error: cannot parse prompt: " << e.what() << "\n" << kGrammarHelp;
      return 1;
    }
    std::vector<int> tokens = caption_of(spec);
    HiddenStateBank bank = model.understanding().forward(tokens);

    SampleSchedule sched =
        schedule_with_overrides(ckpt.config, args.steps, args.spacing, args.guidance);
    Tensor z = sample(model, bank, sched, args.seed);
    Tensor image = decode_latent(z);
    clamp_unit(image);
    write_ppm(args.out, image);
    std::cout << "alignment " << alignment_score(image, spec) << "\n";
    std::cout << "wrote " << args.out << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

// ---- edit ------------------------------------------------------------------------

struct EditArgs {
  std::string checkpoint;
  std::string source;
  std::string instruction;
  std::string out = "edit.ppm";
  uint64_t seed = 1;
  int steps = -1;
  std::string spacing;
  float guidance = -1.0f;
  bool no_gen_context = false;
  bool no_und_context = false;
};

int cmd_edit(const EditArgs& args) {
  try {
    Checkpoint ckpt = load_checkpoint(args.checkpoint);
    MosModel model = model_from_checkpoint(ckpt);

    Tensor source = read_ppm(args.source);
    if (source.ndim() != 3 || source.dim(0) != kImageSize || source.dim(1) != kImageSize ||
        source.dim(2) != 3) {
      std::cerr << "error: source image must be " << kImageSize << "x" << kImageSize
                << " RGB, got " << args.source << "\n";
      return 1;
    }

    std::vector<int> instruction;
    try {
      instruction = tokenize_words(args.instruction);
    } catch (const std::invalid_argument& e) {
      std::cerr << "error: cannot parse instruction: " << e.what() << "\n" << kInstructionHelp;
      return 1;
    }

    Tensor reference = encode_latent(source);
    SampleSchedule sched =
        schedule_with_overrides(ckpt.config, args.steps, args.spacing, args.guidance);
    Tensor z = edit_sample(model, reference, instruction, sched, args.seed,
                           !args.no_und_context, !args.no_gen_context);
    Tensor image = decode_latent(z);
    clamp_unit(image);
    write_ppm(args.out, image);
    std::cout << "wrote " << args.out << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

// ---- inspect-router ------------------------------------------------------------

struct InspectArgs {
  std::string checkpoint;
  std::string prompt;
  std::string timesteps = "0.9,0.5,0.1";
  std::string out_dir = ".";
  uint64_t seed = 1;
};

int cmd_inspect_router(const InspectArgs& args) {
  try {
    Checkpoint ckpt = load_checkpoint(args.checkpoint);
    MosModel model = model_from_checkpoint(ckpt);

    std::vector<float> ts;
    for (const std::string& part : split_list(args.timesteps)) {
      float t = std::stof(part);
      if (t < 0.0f || t > 1.0f) {
        std::cerr << "error: timestep " << part << " is outside [0,1]\n";
        return 1;
      }
      ts.push_back(t);
    }
    if (ts.empty()) {
      std::cerr << "error: no timesteps given\n";
      return 1;
    }

    SceneSpec spec;
    try {
      spec = parse_prompt(args.prompt);
    } catch (const std::invalid_argument& e) {
      std::cerr << "error: cannot parse prompt: " << e.what() << "\n" << kGrammarHelp;
      return 1;
    }
    std::vector<int> tokens = caption_of(spec);
    HiddenStateBank bank = model.understanding().forward(tokens);
    const Tensor& ctx = bank.states.back();

    // One fixed noise draw shared across timesteps so t is the only variable.
    Pcg32 rng = derive_rng(args.seed, rng_tag::kSample);
    Tensor z_t = Tensor::randn(model.config().latent_shape, rng);

    fs::create_directories(args.out_dir);
    const std::string csv_path = args.out_dir + "/routing.csv";
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + csv_path);
    csv << "# mos-routing v1\n";
    export_plan_csv_header(csv);

    int m = model.router().source_layers();
    int n = model.router().target_blocks();
    for (float t : ts) {
      RoutingPlan plan = model.router().route(t, z_t, ctx, 0.0f, args.seed);
      export_plan_csv(csv, t, plan);

      Tensor heat = Tensor::zeros({m, n});
      const float* w = plan.weights.data();
      float* h = heat.data();
      for (int token = 0; token < plan.context_length; ++token) {
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < n; ++j) {
            h[i * n + j] += w[(static_cast<int64_t>(token) * m + i) * n + j] /
                            static_cast<float>(plan.context_length);
          }
        }
      }
      char name[64];
      std::snprintf(name, sizeof(name), "heatmap_t%.3f.pgm", t);
      write_pgm(args.out_dir + "/" + name, heat);
      std::cout << "wrote " << args.out_dir << "/" << name << "\n";
    }
    std::cout << "wrote " << csv_path << " (" << ts.size() * tokens.size() * m * n
              << " data rows)\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

// ---- bench ------------------------------------------------------------------------

struct BenchArgs {
  std::string checkpoint;
  int iterations = 200;
};

int cmd_bench(const BenchArgs& args) {
  try {
    if (args.iterations < 100) {
      std::cerr << "error: --iterations must be at least 100\n";
      return 1;
    }
    Checkpoint ckpt = load_checkpoint(args.checkpoint);
    MosModel model = model_from_checkpoint(ckpt);

    SceneSpec spec = parse_prompt("red square at 0 0 blue circle at 2 3");
    std::vector<int> tokens = caption_of(spec);
    Pcg32 rng = derive_rng(1, rng_tag::kSample);
    Tensor z_t = Tensor::randn(model.config().latent_shape, rng);
    const float t = 0.5f;

    HiddenStateBank bank = model.understanding().forward(tokens);
    RoutingPlan plan = model.router().route(t, z_t, bank.states.back(), 0.0f, 1);
    std::vector<Tensor> contexts = aggregate_states(bank, plan, model.shared_projection());

    // One iteration = all four phases back to back, so clock-speed drift over
    // the run lands on every phase equally and the share stays stable.
    auto timed = [&](auto&& fn) {
      auto start = Clock::now();
      fn();
      return seconds_since(start);
    };
    auto run_enc = [&] { model.understanding().forward(tokens); };
    auto run_router = [&] {
      RoutingPlan p = model.router().route(t, z_t, bank.states.back(), 0.0f, 1);
      aggregate_states(bank, p, model.shared_projection());
    };
    auto run_gen = [&] { model.generation().forward(z_t, contexts); };
    auto run_dec = [&] { decode_latent(z_t); };
    run_enc();
    run_router();
    run_gen();
    run_dec();  // warmup
    size_t iters = static_cast<size_t>(args.iterations);
    std::vector<double> enc_s(iters), router_s(iters), gen_s(iters), dec_s(iters);
    for (size_t i = 0; i < iters; ++i) {
      enc_s[i] = timed(run_enc);
      router_s[i] = timed(run_router);
      gen_s[i] = timed(run_gen);
      dec_s[i] = timed(run_dec);
    }
    double enc_ms = median_ms(enc_s);
    double router_ms = median_ms(router_s);
    double gen_ms = median_ms(gen_s);
    double dec_ms = median_ms(dec_s);

    double share = 100.0 * router_ms / (router_ms + gen_ms);
    std::printf("# mos-bench v1\n");
    std::printf("phase,median_ms\n");
    std::printf("context_encoding,%.6f\n", enc_ms);
    std::printf("router_forward,%.6f\n", router_ms);
    std::printf("generation_forward,%.6f\n", gen_ms);
    std::printf("latent_decode,%.6f\n", dec_ms);
    std::printf("router_share_pct,%.3f\n", share);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

// ---- grad-check ----------------------------------------------------------------

int cmd_grad_check(uint64_t seed) {
  GradCheckReport report = grad_check(seed);
  std::printf("# mos-grad-check v1\n");
  std::printf("tensor,rel_error,ad_max,fd_max\n");
  for (const GradCheckEntry& e : report.entries) {
    std::printf("%s,%.6e,%.6e,%.6e\n", e.name.c_str(), e.rel_error, e.ad_norm, e.fd_norm);
  }
  std::printf("max_rel_error,%.6e\n", report.max_rel_error);
  std::printf("frozen_clean,%d\n", report.frozen_clean ? 1 : 0);
  std::printf("loss_float,%.8f\n", report.loss_float);
  std::printf("loss_double,%.8f\n", report.loss_double);
  std::printf("result,%s\n", report.pass() ? "PASS" : "FAIL");
  return report.pass() ? 0 : 1;
}

// ---- ablate ------------------------------------------------------------------------

struct AblateArgs {
  std::string config_path;
  std::string arms = "learned,handcrafted_even,final_layer_only";
  std::string seeds = "1,2,3";
  int steps = 10000;
  int alignment_prompts = 16;
  std::string out = "ablation.csv";
};

int cmd_ablate(const AblateArgs& args) {
  try {
    RunConfig cfg = RunConfig::defaults();
    if (!args.config_path.empty()) cfg = load_config(args.config_path);

    std::vector<AblationResult> rows;
    for (const std::string& seed_str : split_list(args.seeds)) {
      uint64_t seed = std::stoull(seed_str);
      std::vector<Sample> data = make_dataset(cfg.dataset_size, cfg.dataset_seed + seed);
      AblationProtocol protocol;
      protocol.steps = args.steps;
      protocol.train = cfg.train;
      protocol.model_seed = seed;
      protocol.train_seed = seed;
      protocol.eval_seed = seed + 1000;
      protocol.sampling = cfg.sampling;
      protocol.alignment_prompts = args.alignment_prompts;
      for (const std::string& arm : split_list(args.arms)) {
        AblationResult row = run_ablation(cfg.model, arm, data, data, protocol);
        rows.push_back(row);
        std::printf("%s seed=%llu val_loss=%.6f alignment=%.4f entropy=%.4f wall=%.1fs\n",
                    row.arm.c_str(), static_cast<unsigned long long>(row.seed), row.val_loss,
                    row.alignment, row.entropy, row.wall_seconds);
        std::fflush(stdout);
      }
    }
    std::ofstream out(args.out, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + args.out);
    out << "# mos-ablation v1\n";
    write_ablation_csv(out, rows);
    std::cout << "wrote " << args.out << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  // Accepted for compatibility with scripted runs: everything here is already
  // single-threaded and bit-exact, so the flag changes nothing.
  (void)std::getenv("MOS_DETERMINISTIC");

  CLI::App app{"mixture-of-states diffusion: training, sampling, and analysis"};
  app.require_subcommand(1);

  TrainArgs train_args;
  CLI::App* train = app.add_subcommand("train", "run the training loop from a config file");
  train->add_option("--config", train_args.config_path, "key=value config file")->required();
  train->add_option("--resume", train_args.resume_path, "checkpoint to continue from");
  train->add_option("--set", train_args.overrides, "config override key=value (repeatable)");

  SampleArgs sample_args;
  CLI::App* smp = app.add_subcommand("sample", "generate an image from a caption prompt");
  smp->add_option("--checkpoint", sample_args.checkpoint, "trained checkpoint")->required();
  smp->add_option("--prompt", sample_args.prompt, "caption text")->required();
  smp->add_option("--out", sample_args.out, "output PPM path");
  smp->add_option("--seed", sample_args.seed, "sampling seed");
  smp->add_option("--steps", sample_args.steps, "Euler steps (default: config)");
  smp->add_option("--spacing", sample_args.spacing, "linear | linear_quadratic");
  smp->add_option("--guidance", sample_args.guidance, "guidance scale (default: config)");

  EditArgs edit_args;
  CLI::App* edt = app.add_subcommand("edit", "apply an edit instruction to a source image");
  edt->add_option("--checkpoint", edit_args.checkpoint, "trained checkpoint")->required();
  edt->add_option("--source", edit_args.source, "source PPM image (32x32)")->required();
  edt->add_option("--instruction", edit_args.instruction, "edit instruction text")->required();
  edt->add_option("--out", edit_args.out, "output PPM path");
  edt->add_option("--seed", edit_args.seed, "sampling seed");
  edt->add_option("--steps", edit_args.steps, "Euler steps (default: config)");
  edt->add_option("--spacing", edit_args.spacing, "linear | linear_quadratic");
  edt->add_option("--guidance", edit_args.guidance, "guidance scale (default: config)");
  edt->add_flag("--no-gen-context", edit_args.no_gen_context,
                "drop the reference from the generation tower's sequence");
  edt->add_flag("--no-und-context", edit_args.no_und_context,
                "drop the reference from the understanding context");

  InspectArgs inspect_args;
  CLI::App* ins = app.add_subcommand("inspect-router", "export routing weights as CSV + PGM");
  ins->add_option("--checkpoint", inspect_args.checkpoint, "checkpoint")->required();
  ins->add_option("--prompt", inspect_args.prompt, "caption text")->required();
  ins->add_option("--timesteps", inspect_args.timesteps, "comma list of t values in [0,1]");
  ins->add_option("--out-dir", inspect_args.out_dir, "output directory");
  ins->add_option("--seed", inspect_args.seed, "noise seed for the probe latent");

  BenchArgs bench_args;
  CLI::App* bch = app.add_subcommand("bench", "time the per-iteration phases");
  bch->add_option("--checkpoint", bench_args.checkpoint, "checkpoint")->required();
  bch->add_option("--iterations", bench_args.iterations, "timing iterations (>= 100)");

  uint64_t grad_seed = 1;
  CLI::App* gch = app.add_subcommand("grad-check", "finite-difference gradient verification");
  gch->add_option("--seed", grad_seed, "model/data seed");

  AblateArgs ablate_args;
  CLI::App* abl = app.add_subcommand("ablate", "train fixed-routing arms and compare");
  abl->add_option("--config", ablate_args.config_path, "key=value config file (default: desk)");
  abl->add_option("--arms", ablate_args.arms, "comma list of routing arms");
  abl->add_option("--seeds", ablate_args.seeds, "comma list of seeds");
  abl->add_option("--steps", ablate_args.steps, "training steps per arm");
  abl->add_option("--alignment-prompts", ablate_args.alignment_prompts,
                  "eval scenes sampled for alignment");
  abl->add_option("--out", ablate_args.out, "output CSV path");

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) return cmd_train(train_args);
  if (smp->parsed()) return cmd_sample(sample_args);
  if (edt->parsed()) return cmd_edit(edit_args);
  if (ins->parsed()) return cmd_inspect_router(inspect_args);
  if (bch->parsed()) return cmd_bench(bench_args);
  if (gch->parsed()) return cmd_grad_check(grad_seed);
  if (abl->parsed()) return cmd_ablate(ablate_args);
  return 1;
}
