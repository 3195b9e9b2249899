#include "mos/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace mos {

namespace {

// ---- value formatting ---------------------------------------------------------

std::string fmt_float(float v) {
  char buf[48];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string fmt_shape(const std::vector<int>& dims) {
  std::string out;
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(dims[i]);
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw std::invalid_argument("invalid value for config key " + key + ": '" + value + "'");
}

int parse_int(const std::string& key, const std::string& value) {
  int out = 0;
  auto res = std::from_chars(value.data(), value.data() + value.size(), out);
  if (res.ec != std::errc() || res.ptr != value.data() + value.size()) bad_value(key, value);
  return out;
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
  uint64_t out = 0;
  auto res = std::from_chars(value.data(), value.data() + value.size(), out);
  if (res.ec != std::errc() || res.ptr != value.data() + value.size()) bad_value(key, value);
  return out;
}

float parse_float(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    float out = std::stof(value, &used);
    if (used != value.size()) bad_value(key, value);
    return out;
  } catch (const std::invalid_argument&) {
    bad_value(key, value);
  } catch (const std::out_of_range&) {
    bad_value(key, value);
  }
}

std::vector<int> parse_shape(const std::string& key, const std::string& value) {
  std::vector<int> dims;
  std::string part;
  std::istringstream in(value);
  while (std::getline(in, part, 'x')) dims.push_back(parse_int(key, part));
  if (dims.empty()) bad_value(key, value);
  return dims;
}

// ---- enum names -----------------------------------------------------------------

const char* name_of(TimestepStrategy s) {
  switch (s) {
    case TimestepStrategy::kUniform: return "uniform";
    case TimestepStrategy::kLogitNormal: return "logit_normal";
    case TimestepStrategy::kMode: return "mode";
  }
  return "?";
}

const char* name_of(ScheduleSpacing s) {
  return s == ScheduleSpacing::kLinear ? "linear" : "linear_quadratic";
}

const char* name_of(PredictionMode m) {
  return m == PredictionMode::kTokenSpecific ? "token_specific" : "sample_wise";
}

const char* name_of(TrainObjective o) {
  return o == TrainObjective::kGeneration ? "generation" : "editing";
}

TimestepStrategy strategy_from(const std::string& key, const std::string& v) {
  if (v == "uniform") return TimestepStrategy::kUniform;
  if (v == "logit_normal") return TimestepStrategy::kLogitNormal;
  if (v == "mode") return TimestepStrategy::kMode;
  bad_value(key, v);
}

ScheduleSpacing spacing_from(const std::string& key, const std::string& v) {
  if (v == "linear") return ScheduleSpacing::kLinear;
  if (v == "linear_quadratic") return ScheduleSpacing::kLinearQuadratic;
  bad_value(key, v);
}

PredictionMode mode_from(const std::string& key, const std::string& v) {
  if (v == "token_specific") return PredictionMode::kTokenSpecific;
  if (v == "sample_wise") return PredictionMode::kSampleWise;
  bad_value(key, v);
}

TrainObjective objective_from(const std::string& key, const std::string& v) {
  if (v == "generation") return TrainObjective::kGeneration;
  if (v == "editing") return TrainObjective::kEditing;
  bad_value(key, v);
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

void apply_key(RunConfig& c, const std::string& key, const std::string& v) {
  // clang-format off
  if      (key == "seed")                       c.seed = parse_u64(key, v);
  else if (key == "output_dir")                 c.output_dir = v;
  else if (key == "dataset.size")               c.dataset_size = parse_int(key, v);
  else if (key == "dataset.seed")               c.dataset_seed = parse_u64(key, v);
  else if (key == "train.objective")            c.objective = objective_from(key, v);
  else if (key == "train.steps")                c.train_steps = parse_int(key, v);
  else if (key == "train.checkpoint_every")     c.checkpoint_every = parse_int(key, v);
  else if (key == "train.log_every")            c.log_every = parse_int(key, v);
  else if (key == "train.batch_size")           c.train.batch_size = parse_int(key, v);
  else if (key == "train.epsilon")              c.train.epsilon = parse_float(key, v);
  else if (key == "train.context_dropout_p")    c.train.context_dropout_p = parse_float(key, v);
  else if (key == "train.timestep.strategy")    c.train.timestep.strategy = strategy_from(key, v);
  else if (key == "train.timestep.mode_scale")  c.train.timestep.mode_scale = parse_float(key, v);
  else if (key == "train.timestep.mode_shift")  c.train.timestep.mode_shift = parse_float(key, v);
  else if (key == "optimizer.lr")               c.train.optimizer.lr = parse_float(key, v);
  else if (key == "optimizer.beta1")            c.train.optimizer.beta1 = parse_float(key, v);
  else if (key == "optimizer.beta2")            c.train.optimizer.beta2 = parse_float(key, v);
  else if (key == "optimizer.weight_decay")     c.train.optimizer.weight_decay = parse_float(key, v);
  else if (key == "optimizer.eps")              c.train.optimizer.eps = parse_float(key, v);
  else if (key == "sampling.steps")             c.sampling.steps = parse_int(key, v);
  else if (key == "sampling.spacing")           c.sampling.spacing = spacing_from(key, v);
  else if (key == "sampling.guidance_scale")    c.sampling.guidance_scale = parse_float(key, v);
  else if (key == "sampling.context_dropout_p") c.sampling.context_dropout_p = parse_float(key, v);
  else if (key == "understanding.depth")        c.model.understanding.depth = parse_int(key, v);
  else if (key == "understanding.hidden_dim")   c.model.understanding.hidden_dim = parse_int(key, v);
  else if (key == "understanding.heads")        c.model.understanding.heads = parse_int(key, v);
  else if (key == "understanding.vocab_size")   c.model.understanding.vocab_size = parse_int(key, v);
  else if (key == "generation.depth")           c.model.generation.depth = parse_int(key, v);
  else if (key == "generation.hidden_dim")      c.model.generation.hidden_dim = parse_int(key, v);
  else if (key == "generation.heads")           c.model.generation.heads = parse_int(key, v);
  else if (key == "generation.patch_size")      c.model.generation.patch_size = parse_int(key, v);
  else if (key == "generation.register_tokens") c.model.generation.register_tokens = parse_int(key, v);
  else if (key == "router.hidden_dim")          c.model.router.hidden_dim = parse_int(key, v);
  else if (key == "router.heads")               c.model.router.heads = parse_int(key, v);
  else if (key == "router.blocks")              c.model.router.blocks = parse_int(key, v);
  else if (key == "router.k")                   c.model.router.k = parse_int(key, v);
  else if (key == "router.epsilon")             c.model.router.epsilon = parse_float(key, v);
  else if (key == "router.prediction_mode")     c.model.router.prediction_mode = mode_from(key, v);
  else if (key == "latent_shape")               c.model.latent_shape = parse_shape(key, v);
  else if (key == "max_positions")              c.model.max_positions = parse_int(key, v);
  else throw std::invalid_argument("unknown config key: " + key);
  // clang-format on
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig cfg;
  cfg.model = ModelConfig::desk_default();
  return cfg;
}

std::string serialize_config(const RunConfig& c) {
  std::ostringstream os;
  os << "seed = " << c.seed << '\n'
     << "output_dir = " << c.output_dir << '\n'
     << "dataset.size = " << c.dataset_size << '\n'
     << "dataset.seed = " << c.dataset_seed << '\n'
     << "train.objective = " << name_of(c.objective) << '\n'
     << "train.steps = " << c.train_steps << '\n'
     << "train.checkpoint_every = " << c.checkpoint_every << '\n'
     << "train.log_every = " << c.log_every << '\n'
     << "train.batch_size = " << c.train.batch_size << '\n'
     << "train.epsilon = " << fmt_float(c.train.epsilon) << '\n'
     << "train.context_dropout_p = " << fmt_float(c.train.context_dropout_p) << '\n'
     << "train.timestep.strategy = " << name_of(c.train.timestep.strategy) << '\n'
     << "train.timestep.mode_scale = " << fmt_float(c.train.timestep.mode_scale) << '\n'
     << "train.timestep.mode_shift = " << fmt_float(c.train.timestep.mode_shift) << '\n'
     << "optimizer.lr = " << fmt_float(c.train.optimizer.lr) << '\n'
     << "optimizer.beta1 = " << fmt_float(c.train.optimizer.beta1) << '\n'
     << "optimizer.beta2 = " << fmt_float(c.train.optimizer.beta2) << '\n'
     << "optimizer.weight_decay = " << fmt_float(c.train.optimizer.weight_decay) << '\n'
     << "optimizer.eps = " << fmt_float(c.train.optimizer.eps) << '\n'
     << "sampling.steps = " << c.sampling.steps << '\n'
     << "sampling.spacing = " << name_of(c.sampling.spacing) << '\n'
     << "sampling.guidance_scale = " << fmt_float(c.sampling.guidance_scale) << '\n'
     << "sampling.context_dropout_p = " << fmt_float(c.sampling.context_dropout_p) << '\n'
     << "understanding.depth = " << c.model.understanding.depth << '\n'
     << "understanding.hidden_dim = " << c.model.understanding.hidden_dim << '\n'
     << "understanding.heads = " << c.model.understanding.heads << '\n'
     << "understanding.vocab_size = " << c.model.understanding.vocab_size << '\n'
     << "generation.depth = " << c.model.generation.depth << '\n'
     << "generation.hidden_dim = " << c.model.generation.hidden_dim << '\n'
     << "generation.heads = " << c.model.generation.heads << '\n'
     << "generation.patch_size = " << c.model.generation.patch_size << '\n'
     << "generation.register_tokens = " << c.model.generation.register_tokens << '\n'
     << "router.hidden_dim = " << c.model.router.hidden_dim << '\n'
     << "router.heads = " << c.model.router.heads << '\n'
     << "router.blocks = " << c.model.router.blocks << '\n'
     << "router.k = " << c.model.router.k << '\n'
     << "router.epsilon = " << fmt_float(c.model.router.epsilon) << '\n'
     << "router.prediction_mode = " << name_of(c.model.router.prediction_mode) << '\n'
     << "latent_shape = " << fmt_shape(c.model.latent_shape) << '\n'
     << "max_positions = " << c.model.max_positions << '\n';
  return os.str();
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg = RunConfig::defaults();
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  " is not key = value: '" + line + "'");
    }
    apply_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

void apply_config_override(RunConfig& cfg, const std::string& assignment) {
  size_t eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw std::invalid_argument("override is not key=value: '" + assignment + "'");
  }
  apply_key(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

}  // namespace mos
