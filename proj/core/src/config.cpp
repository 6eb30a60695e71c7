#include "vqnerv/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "vqnerv/errors.hpp"

namespace vqnerv {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw ConfigError("invalid value '" + value + "' for " + key);
}

int to_int(const std::string& key, const std::string& v) {
  int out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v);
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v);
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) bad_value(key, v);
    return d;
  } catch (const std::logic_error&) {
    bad_value(key, v);
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::string fmt_double(double d) {
  std::ostringstream os;
  os.precision(9);
  os << d;
  return os.str();
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

}  // namespace

KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string t = trim(line);
    if (t.empty()) {
      if (end == text.size()) break;
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(std::string_view(t).substr(0, eq));
    std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
    if (end == text.size()) break;
  }
  return out;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

std::pair<std::string, std::string> parse_override(std::string_view text) {
  KeyValues kv = parse_key_values(text);
  if (kv.size() != 1) throw ConfigError("override must be key=value: " + std::string(text));
  return kv.front();
}

bool apply_model_key(ModelConfig& c, const std::string& key, const std::string& v) {
  if (key == "height") c.height = to_int(key, v);
  else if (key == "width") c.width = to_int(key, v);
  else if (key == "strides") {
    c.strides.clear();
    for (const std::string& s : split_list(v)) c.strides.push_back(to_int(key, s));
  } else if (key == "embed_channels") c.embed_channels = to_int(key, v);
  else if (key == "encoder_width") c.encoder_width = to_int(key, v);
  else if (key == "decoder_budget") c.decoder_budget = to_double(key, v);
  else if (key == "decoder_channels") c.decoder_channels = to_int(key, v);
  else if (key == "reduction") c.reduction = static_cast<float>(to_double(key, v));
  else if (key == "min_channels") c.min_channels = to_int(key, v);
  else if (key == "haar_levels") c.haar_levels = to_int(key, v);
  else if (key == "use_vq") c.use_vq = to_bool(key, v);
  else if (key == "coupling_hidden") c.coupling_hidden = to_int(key, v);
  else if (key == "coupling_kernel") c.coupling_kernel = to_int(key, v);
  else if (key == "scale_clamp") c.scale_clamp = static_cast<float>(to_double(key, v));
  else if (key == "detach_block_inputs") c.detach_block_inputs = to_bool(key, v);
  else if (key == "codebook_size") c.codebook.size = to_int(key, v);
  else if (key == "codebook_dim") c.codebook.dim = to_int(key, v);
  else if (key == "codebook_decay") c.codebook.decay = static_cast<float>(to_double(key, v));
  else if (key == "dead_threshold") c.codebook.dead_threshold = static_cast<float>(to_double(key, v));
  else if (key == "beta") c.codebook.beta = static_cast<float>(to_double(key, v));
  else if (key == "shallow_optimization") c.codebook.shallow_optimization = to_bool(key, v);
  else if (key == "codebook_init_stddev") c.codebook.init_stddev = static_cast<float>(to_double(key, v));
  else return false;
  return true;
}

std::string echo(const ModelConfig& c) {
  std::ostringstream os;
  os << "height = " << c.height << '\n' << "width = " << c.width << '\n' << "strides = ";
  for (std::size_t i = 0; i < c.strides.size(); ++i) os << (i ? "," : "") << c.strides[i];
  os << '\n'
     << "embed_channels = " << c.embed_channels << '\n'
     << "encoder_width = " << c.encoder_width << '\n'
     << "decoder_budget = " << fmt_double(c.decoder_budget) << '\n'
     << "decoder_channels = " << c.decoder_channels << '\n'
     << "reduction = " << fmt_double(c.reduction) << '\n'
     << "min_channels = " << c.min_channels << '\n'
     << "haar_levels = " << c.haar_levels << '\n'
     << "use_vq = " << fmt_bool(c.use_vq) << '\n'
     << "coupling_hidden = " << c.coupling_hidden << '\n'
     << "coupling_kernel = " << c.coupling_kernel << '\n'
     << "scale_clamp = " << fmt_double(c.scale_clamp) << '\n'
     << "detach_block_inputs = " << fmt_bool(c.detach_block_inputs) << '\n'
     << "codebook_size = " << c.codebook.size << '\n'
     << "codebook_dim = " << c.codebook.dim << '\n'
     << "codebook_decay = " << fmt_double(c.codebook.decay) << '\n'
     << "dead_threshold = " << fmt_double(c.codebook.dead_threshold) << '\n'
     << "beta = " << fmt_double(c.codebook.beta) << '\n'
     << "shallow_optimization = " << fmt_bool(c.codebook.shallow_optimization) << '\n'
     << "codebook_init_stddev = " << fmt_double(c.codebook.init_stddev) << '\n';
  return os.str();
}

ModelConfig parse_model_config(std::string_view text) {
  ModelConfig c;
  for (const auto& [k, v] : parse_key_values(text))
    if (!apply_model_key(c, k, v)) throw ConfigError("unknown model key " + k);
  validate(c);
  return c;
}

std::string to_string(Task task) {
  switch (task) {
    case Task::kRegress: return "regress";
    case Task::kInpaint: return "inpaint";
    case Task::kInterpolate: return "interpolate";
  }
  return "regress";
}

std::string to_string(MaskKind kind) { return kind == MaskKind::kBox ? "box" : "disperse"; }

int RunConfig::resolved_finetune_epochs() const {
  if (finetune_epochs >= 0) return finetune_epochs;
  return std::max(1, epochs / 10);
}

void apply_key(RunConfig& c, const std::string& key, const std::string& v) {
  if (apply_model_key(c.model, key, v)) return;
  if (key == "task") {
    if (v == "regress") c.task = Task::kRegress;
    else if (v == "inpaint") c.task = Task::kInpaint;
    else if (v == "interpolate") c.task = Task::kInterpolate;
    else bad_value(key, v);
  } else if (key == "epochs") c.epochs = to_int(key, v);
  else if (key == "eval_every") c.eval_every = to_int(key, v);
  else if (key == "alpha") c.loss.alpha = static_cast<float>(to_double(key, v));
  else if (key == "lr") c.adam.lr = static_cast<float>(to_double(key, v));
  else if (key == "beta1") c.adam.beta1 = static_cast<float>(to_double(key, v));
  else if (key == "beta2") c.adam.beta2 = static_cast<float>(to_double(key, v));
  else if (key == "weight_decay") c.adam.weight_decay = static_cast<float>(to_double(key, v));
  else if (key == "data_dir") c.data_dir = v;
  else if (key == "synthetic_frames") c.synthetic_frames = to_int(key, v);
  else if (key == "synthetic_seed") c.synthetic_seed = to_u64(key, v);
  else if (key == "crop_height") c.crop_height = to_int(key, v);
  else if (key == "crop_width") c.crop_width = to_int(key, v);
  else if (key == "raw_height") c.raw_height = to_int(key, v);
  else if (key == "raw_width") c.raw_width = to_int(key, v);
  else if (key == "seed") c.seed = to_u64(key, v);
  else if (key == "out_dir") c.out_dir = v;
  else if (key == "prune_ratio") c.prune_ratio = static_cast<float>(to_double(key, v));
  else if (key == "finetune_epochs") c.finetune_epochs = to_int(key, v);
  else if (key == "mask_kind") {
    if (v == "box") c.mask_kind = MaskKind::kBox;
    else if (v == "disperse") c.mask_kind = MaskKind::kDisperse;
    else bad_value(key, v);
  } else if (key == "mask_boxes") c.mask_boxes = to_int(key, v);
  else if (key == "mask_width") c.mask_width = to_int(key, v);
  else if (key == "disperse_fraction") c.disperse_fraction = static_cast<float>(to_double(key, v));
  else if (key == "mask_seed") c.mask_seed = to_u64(key, v);
  else if (key == "rd_budgets") {
    c.rd_budgets.clear();
    for (const std::string& s : split_list(v)) c.rd_budgets.push_back(to_double(key, s));
  } else if (key == "save_frames") c.save_frames = to_bool(key, v);
  else throw ConfigError("unknown config key " + key);
}

void validate(const RunConfig& c) {
  validate(c.model);
  if (c.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (c.eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (c.loss.alpha < 0.0f || c.loss.alpha > 1.0f) throw ConfigError("alpha must be in [0,1]");
  if (!(c.adam.lr > 0.0f)) throw ConfigError("lr must be positive");
  if (c.adam.beta1 < 0.0f || c.adam.beta1 >= 1.0f || c.adam.beta2 < 0.0f || c.adam.beta2 >= 1.0f)
    throw ConfigError("Adam betas must be in [0,1)");
  if (c.data_dir.empty() && c.synthetic_frames < 1)
    throw ConfigError("synthetic_frames must be >= 1");
  if (c.crop_height < 0 || c.crop_width < 0 || (c.crop_height > 0) != (c.crop_width > 0))
    throw ConfigError("crop needs both crop_height and crop_width");
  if (c.raw_height < 0 || c.raw_width < 0 || (c.raw_height > 0) != (c.raw_width > 0))
    throw ConfigError("raw frames need both raw_height and raw_width");
  if (c.prune_ratio < 0.0f || c.prune_ratio >= 1.0f) throw ConfigError("prune_ratio must be in [0,1)");
  if (c.finetune_epochs < -1) throw ConfigError("finetune_epochs must be >= -1");
  if (c.mask_boxes < 0 || c.mask_width < 0) throw ConfigError("mask sizes must be >= 0");
  if (c.disperse_fraction < 0.0f || c.disperse_fraction > 1.0f)
    throw ConfigError("disperse_fraction must be in [0,1]");
  for (double b : c.rd_budgets)
    if (!(b > 0.0)) throw ConfigError("rd_budgets must be positive");
}

std::string echo(const RunConfig& c) {
  std::ostringstream os;
  os << echo(c.model) << "task = " << to_string(c.task) << '\n'
     << "epochs = " << c.epochs << '\n'
     << "eval_every = " << c.eval_every << '\n'
     << "alpha = " << fmt_double(c.loss.alpha) << '\n'
     << "lr = " << fmt_double(c.adam.lr) << '\n'
     << "beta1 = " << fmt_double(c.adam.beta1) << '\n'
     << "beta2 = " << fmt_double(c.adam.beta2) << '\n'
     << "weight_decay = " << fmt_double(c.adam.weight_decay) << '\n'
     << "data_dir = " << c.data_dir << '\n'
     << "synthetic_frames = " << c.synthetic_frames << '\n'
     << "synthetic_seed = " << c.synthetic_seed << '\n'
     << "crop_height = " << c.crop_height << '\n'
     << "crop_width = " << c.crop_width << '\n'
     << "raw_height = " << c.raw_height << '\n'
     << "raw_width = " << c.raw_width << '\n'
     << "seed = " << c.seed << '\n'
     << "out_dir = " << c.out_dir << '\n'
     << "prune_ratio = " << fmt_double(c.prune_ratio) << '\n'
     << "finetune_epochs = " << c.finetune_epochs << '\n'
     << "mask_kind = " << to_string(c.mask_kind) << '\n'
     << "mask_boxes = " << c.mask_boxes << '\n'
     << "mask_width = " << c.mask_width << '\n'
     << "disperse_fraction = " << fmt_double(c.disperse_fraction) << '\n'
     << "mask_seed = " << c.mask_seed << '\n'
     << "rd_budgets = ";
  for (std::size_t i = 0; i < c.rd_budgets.size(); ++i)
    os << (i ? "," : "") << fmt_double(c.rd_budgets[i]);
  os << '\n' << "save_frames = " << fmt_bool(c.save_frames) << '\n';
  return os.str();
}

RunConfig parse_run_config(std::string_view text) {
  RunConfig c;
  for (const auto& [k, v] : parse_key_values(text)) apply_key(c, k, v);
  validate(c);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& file, const KeyValues& overrides) {
  RunConfig c;
  if (!file.empty())
    for (const auto& [k, v] : read_key_values(file)) apply_key(c, k, v);
  for (const auto& [k, v] : overrides) apply_key(c, k, v);
  validate(c);
  return c;
}

}  // namespace vqnerv
