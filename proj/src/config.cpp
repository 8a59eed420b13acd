#include "fra/config.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <type_traits>

#include "fra/common.hpp"

namespace fra {
namespace {

std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string trim(std::string s) {
  auto ws = [](unsigned char ch) { return std::isspace(ch) != 0; };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
  return s;
}

int64_t parse_int(const std::string& key, const std::string& text) {
  auto t = trim(text);
  int64_t v = 0;
  auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw ConfigError("config key '" + key + "': expected integer, got '" + text + "'");
  }
  return v;
}

double parse_real(const std::string& key, const std::string& text) {
  auto t = trim(text);
  double v = 0;
  auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw ConfigError("config key '" + key + "': expected real, got '" + text + "'");
  }
  return v;
}

template <size_t K>
std::array<double, K> parse_reals(const std::string& key, const std::string& text) {
  auto t = trim(text);
  if (!t.empty() && t.front() == '[' && t.back() == ']') t = t.substr(1, t.size() - 2);
  std::array<double, K> out{};
  std::stringstream ss(t);
  std::string item;
  size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= K) break;
    out[i++] = parse_real(key, item);
  }
  if (i != K || std::getline(ss, item, ',')) {
    throw ConfigError("config key '" + key + "': expected list of " + std::to_string(K) +
                      " reals, got '" + text + "'");
  }
  return out;
}

struct Field {
  std::string key;
  std::string provenance;
  bool quoted = false;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename Access>
Field make_field(std::string key, Access access, std::string provenance) {
  Field f;
  f.key = key;
  f.provenance = std::move(provenance);
  using T = std::remove_reference_t<decltype(access(std::declval<RunConfig&>()))>;
  f.get = [access](const RunConfig& c) -> std::string {
    const T& v = access(const_cast<RunConfig&>(c));
    if constexpr (std::is_same_v<T, int64_t>) {
      return std::to_string(v);
    } else if constexpr (std::is_same_v<T, double>) {
      return format_real(v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else {
      std::string s = "[";
      for (size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + format_real(v[i]);
      return s + "]";
    }
  };
  f.set = [access, key](RunConfig& c, const std::string& text) {
    T& v = access(c);
    if constexpr (std::is_same_v<T, int64_t>) {
      v = parse_int(key, text);
    } else if constexpr (std::is_same_v<T, double>) {
      v = parse_real(key, text);
    } else if constexpr (std::is_same_v<T, std::string>) {
      v = text;
    } else {
      v = parse_reals<std::tuple_size_v<T>>(key, text);
    }
  };
  f.quoted = std::is_same_v<T, std::string>;
  return f;
}

#define FRA_FIELD(key, member, prov) \
  make_field(key, [](RunConfig& c) -> auto& { return c.member; }, prov)

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      FRA_FIELD("seed", seed, "chosen"),
      FRA_FIELD("augmentation.crop_size", augmentation.crop_size, "chosen"),
      FRA_FIELD("augmentation.crop_scale_range", augmentation.crop_scale_range, "paper"),
      FRA_FIELD("augmentation.crop_ratio_range", augmentation.crop_ratio_range, "paper"),
      FRA_FIELD("augmentation.flip_prob", augmentation.flip_prob, "paper"),
      FRA_FIELD("augmentation.jitter_strengths", augmentation.jitter_strengths, "paper"),
      FRA_FIELD("augmentation.jitter_prob", augmentation.jitter_prob, "paper"),
      FRA_FIELD("augmentation.grayscale_prob", augmentation.grayscale_prob, "paper"),
      FRA_FIELD("augmentation.blur_probs", augmentation.blur_probs, "paper"),
      FRA_FIELD("augmentation.solarize_probs", augmentation.solarize_probs, "paper"),
      FRA_FIELD("augmentation.normalization_mean", augmentation.normalization_mean, "chosen"),
      FRA_FIELD("augmentation.normalization_std", augmentation.normalization_std, "chosen"),
      FRA_FIELD("model.encoder", model.encoder, "chosen"),
      FRA_FIELD("model.encoder_width", model.encoder_width, "chosen"),
      FRA_FIELD("model.embedding_dim", model.embedding_dim, "chosen"),
      FRA_FIELD("model.projector_hidden", model.projector_hidden, "chosen"),
      FRA_FIELD("model.predictor_hidden", model.predictor_hidden, "chosen"),
      FRA_FIELD("model.num_regions", model.num_regions, "paper"),
      FRA_FIELD("model.decoder_depth", model.decoder_depth, "paper"),
      FRA_FIELD("model.decoder_heads", model.decoder_heads, "chosen"),
      FRA_FIELD("model.decoder_ffn", model.decoder_ffn, "chosen"),
      FRA_FIELD("model.decoder_dim", model.decoder_dim, "chosen"),
      FRA_FIELD("loss.lambda_c", loss.lambda_c, "paper"),
      FRA_FIELD("loss.lambda_r", loss.lambda_r, "paper"),
      FRA_FIELD("loss.lambda_memax", loss.lambda_memax, "chosen"),
      FRA_FIELD("loss.assign_temperature", loss.assign_temperature, "chosen"),
      FRA_FIELD("loss.sinkhorn_iters", loss.sinkhorn_iters, "chosen"),
      FRA_FIELD("loss.sinkhorn_eps", loss.sinkhorn_eps, "chosen"),
      FRA_FIELD("train.total_steps", train.total_steps, "chosen"),
      FRA_FIELD("train.batch_size", train.batch_size, "chosen"),
      FRA_FIELD("train.optimizer", train.optimizer, "chosen"),
      FRA_FIELD("train.base_lr", train.base_lr, "chosen"),
      FRA_FIELD("train.weight_decay", train.weight_decay, "chosen"),
      FRA_FIELD("train.warmup_steps", train.warmup_steps, "chosen"),
      FRA_FIELD("train.tau_schedule", train.tau_schedule, "paper"),
      FRA_FIELD("train.tau_base", train.tau_base, "paper"),
      FRA_FIELD("train.tau_final", train.tau_final, "paper"),
      FRA_FIELD("train.checkpoint_every", train.checkpoint_every, "chosen"),
      FRA_FIELD("train.prefetch", train.prefetch, "chosen"),
      FRA_FIELD("train.threads", train.threads, "chosen"),
      FRA_FIELD("train.out_dir", train.out_dir, "chosen"),
      FRA_FIELD("data.source", data.source, "chosen"),
      FRA_FIELD("data.folder", data.folder, "chosen"),
      FRA_FIELD("data.image_size", data.image_size, "chosen"),
      FRA_FIELD("data.synthetic_count", data.synthetic_count, "chosen"),
      FRA_FIELD("data.n_parts", data.n_parts, "chosen"),
      FRA_FIELD("data.position_jitter", data.position_jitter, "chosen"),
      FRA_FIELD("data.scale_jitter", data.scale_jitter, "chosen"),
      FRA_FIELD("data.palette_seed", data.palette_seed, "chosen"),
      FRA_FIELD("data.mouth_open_prob", data.mouth_open_prob, "chosen"),
      FRA_FIELD("eval.probe_epochs", eval.probe_epochs, "chosen"),
      FRA_FIELD("eval.probe_lr", eval.probe_lr, "chosen"),
      FRA_FIELD("eval.probe_batch", eval.probe_batch, "chosen"),
      FRA_FIELD("eval.probe_train_fraction", eval.probe_train_fraction, "chosen"),
      FRA_FIELD("eval.probe_count", eval.probe_count, "chosen"),
      FRA_FIELD("eval.discovery_quantile", eval.discovery_quantile, "chosen"),
      FRA_FIELD("eval.discovery_count", eval.discovery_count, "chosen"),
  };
  return table;
}

#undef FRA_FIELD

const Field* find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (size_t j = 1; j <= b.size(); ++j) {
      size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

void check_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ConfigError(std::string(name) + " must lie in [0,1], got " + format_real(p));
  }
}

void check(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

void flatten(const YAML::Node& node, const std::string& prefix,
             std::vector<std::pair<std::string, std::string>>& out) {
  if (node.IsMap()) {
    for (const auto& kv : node) {
      auto key = kv.first.as<std::string>();
      flatten(kv.second, prefix.empty() ? key : prefix + "." + key, out);
    }
  } else if (node.IsSequence()) {
    std::string joined;
    for (size_t i = 0; i < node.size(); ++i) {
      if (!node[i].IsScalar()) throw ConfigError("config key '" + prefix + "': nested list");
      joined += (i ? "," : "") + node[i].as<std::string>();
    }
    out.emplace_back(prefix, joined);
  } else if (node.IsScalar()) {
    out.emplace_back(prefix, node.as<std::string>());
  } else if (node.IsNull() && !prefix.empty()) {
    out.emplace_back(prefix, "");
  }
}

}  // namespace

void AugmentationConfig::validate() const {
  check(crop_size > 0, "augmentation.crop_size must be positive");
  check(crop_scale_range[0] > 0.0 && crop_scale_range[0] <= crop_scale_range[1] &&
            crop_scale_range[1] <= 1.0,
        "augmentation.crop_scale_range must be ascending within (0,1]");
  check(crop_ratio_range[0] > 0.0 && crop_ratio_range[0] <= crop_ratio_range[1],
        "augmentation.crop_ratio_range must be positive and ascending");
  check_prob(flip_prob, "augmentation.flip_prob");
  check_prob(jitter_prob, "augmentation.jitter_prob");
  check_prob(grayscale_prob, "augmentation.grayscale_prob");
  for (double p : blur_probs) check_prob(p, "augmentation.blur_probs");
  for (double p : solarize_probs) check_prob(p, "augmentation.solarize_probs");
  for (size_t i = 0; i < 3; ++i) check(jitter_strengths[i] >= 0.0, "jitter strengths must be >= 0");
  check(jitter_strengths[3] >= 0.0 && jitter_strengths[3] <= 0.5, "hue jitter must lie in [0,0.5]");
  for (double s : normalization_std) check(s > 0.0, "augmentation.normalization_std must be positive");
}

void ModelConfig::validate() const {
  check(encoder == "resnet_desk" || encoder == "resnet18" || encoder == "resnet50",
        "model.encoder must be one of resnet_desk, resnet18, resnet50");
  check(encoder_width > 0 && embedding_dim > 0 && projector_hidden > 0,
        "model widths must be positive");
  check(predictor_hidden >= 0, "model.predictor_hidden must be >= 0");
  check(num_regions >= 1, "model.num_regions must be >= 1");
  check(decoder_depth >= 1 && decoder_depth <= 3, "model.decoder_depth must lie in [1,3]");
  check(decoder_heads >= 1 && resolved_decoder_dim() % decoder_heads == 0,
        "model.decoder_heads must divide the decoder width");
  check(decoder_ffn > 0, "model.decoder_ffn must be positive");
}

std::string ModelConfig::topology_key() const {
  std::ostringstream os;
  os << encoder << '/' << encoder_width << '/' << embedding_dim << '/' << projector_hidden << '/'
     << predictor_hidden << '/' << num_regions << '/' << decoder_depth << '/' << decoder_heads << '/'
     << decoder_ffn << '/' << resolved_decoder_dim();
  return os.str();
}

void LossConfig::validate() const {
  check(lambda_c >= 0.0 && lambda_c <= 1.0, "loss.lambda_c must lie in [0,1]");
  check(lambda_r >= 0.0, "loss.lambda_r must be >= 0");
  check(lambda_memax >= 0.0, "loss.lambda_memax must be >= 0");
  check(assign_temperature > 0.0, "loss.assign_temperature must be positive");
  check(sinkhorn_iters >= 1, "loss.sinkhorn_iters must be >= 1");
  check(sinkhorn_eps > 0.0, "loss.sinkhorn_eps must be positive");
}

void TrainConfig::validate() const {
  check(total_steps >= 0, "train.total_steps must be >= 0");
  check(warmup_steps >= 0, "train.warmup_steps must be >= 0");
  check(total_steps == 0 || total_steps > warmup_steps,
        "train.total_steps must exceed train.warmup_steps");
  check(batch_size >= 2, "train.batch_size must be >= 2");
  check(optimizer == "adamw" || optimizer == "sgd", "train.optimizer must be adamw or sgd");
  check(base_lr > 0.0, "train.base_lr must be positive");
  check(weight_decay >= 0.0, "train.weight_decay must be >= 0");
  check(tau_schedule == "cosine" || tau_schedule == "constant",
        "train.tau_schedule must be cosine or constant");
  check_prob(tau_base, "train.tau_base");
  check_prob(tau_final, "train.tau_final");
  check(checkpoint_every >= 0, "train.checkpoint_every must be >= 0");
  check(prefetch >= 1, "train.prefetch must be >= 1");
  check(threads >= 0, "train.threads must be >= 0");
}

void DataConfig::validate() const {
  check(source == "synthetic" || source == "folder", "data.source must be synthetic or folder");
  check(source != "folder" || !folder.empty(), "data.folder is required when data.source=folder");
  check(image_size >= 16, "data.image_size must be >= 16");
  check(synthetic_count >= 1, "data.synthetic_count must be >= 1");
  check(n_parts >= 1 && n_parts <= 7, "data.n_parts must lie in [1,7]");
  check(position_jitter >= 0.0 && scale_jitter >= 0.0, "data jitter must be >= 0");
  check_prob(mouth_open_prob, "data.mouth_open_prob");
}

void EvalConfig::validate() const {
  check(probe_epochs >= 1 && probe_batch >= 1, "eval.probe_epochs/probe_batch must be >= 1");
  check(probe_lr > 0.0, "eval.probe_lr must be positive");
  check(probe_train_fraction > 0.0 && probe_train_fraction < 1.0,
        "eval.probe_train_fraction must lie in (0,1)");
  check(probe_count >= 2, "eval.probe_count must be >= 2");
  check(discovery_quantile > 0.0 && discovery_quantile <= 1.0,
        "eval.discovery_quantile must lie in (0,1]");
  check(discovery_count >= 1, "eval.discovery_count must be >= 1");
}

void RunConfig::validate() const {
  augmentation.validate();
  model.validate();
  loss.validate();
  train.validate();
  data.validate();
  eval.validate();
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& f : fields()) v.push_back(f.key);
    return v;
  }();
  return names;
}

std::string RunConfig::provenance(const std::string& dotted_key) {
  const Field* f = find_field(dotted_key);
  if (!f) throw ConfigError("unknown config key '" + dotted_key + "'");
  return f->provenance;
}

std::vector<std::string> nearest_keys(const std::string& key) {
  size_t best = std::numeric_limits<size_t>::max();
  std::vector<std::string> out;
  for (const auto& f : fields()) {
    size_t d = edit_distance(key, f.key);
    if (d < best) {
      best = d;
      out.clear();
    }
    if (d == best) out.push_back(f.key);
  }
  return out;
}

void RunConfig::set(const std::string& dotted_key, const std::string& value) {
  const Field* f = find_field(dotted_key);
  if (!f) {
    std::string msg = "unknown config key '" + dotted_key + "'; did you mean";
    auto near = nearest_keys(dotted_key);
    for (size_t i = 0; i < near.size(); ++i) msg += (i ? ", '" : " '") + near[i] + "'";
    throw ConfigError(msg + "?");
  }
  f->set(*this, value);
}

std::string RunConfig::get(const std::string& dotted_key) const {
  const Field* f = find_field(dotted_key);
  if (!f) throw ConfigError("unknown config key '" + dotted_key + "'");
  return f->get(*this);
}

std::string RunConfig::serialize() const {
  YAML::Emitter out;
  out << YAML::BeginMap;
  std::string section;
  for (const auto& f : fields()) {
    auto dot = f.key.find('.');
    std::string sec = dot == std::string::npos ? "" : f.key.substr(0, dot);
    std::string name = dot == std::string::npos ? f.key : f.key.substr(dot + 1);
    if (sec != section) {
      if (!section.empty()) out << YAML::EndMap;
      if (!sec.empty()) out << YAML::Key << sec << YAML::Value << YAML::BeginMap;
      section = sec;
    }
    out << YAML::Key << name << YAML::Value;
    if (f.quoted) {
      out << YAML::DoubleQuoted << f.get(*this);
    } else {
      out << f.get(*this);
    }
  }
  if (!section.empty()) out << YAML::EndMap;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

RunConfig resolve_config_text(const std::string& yaml_text,
                              const std::vector<std::string>& overrides) {
  RunConfig cfg;
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  if (root && !root.IsNull() && !root.IsMap()) {
    throw ConfigError("config root must be a mapping");
  }
  std::vector<std::pair<std::string, std::string>> entries;
  if (root && root.IsMap()) flatten(root, "", entries);
  for (const auto& [k, v] : entries) cfg.set(k, v);
  for (const auto& o : overrides) {
    auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override '" + o + "' is not of the form key=value");
    }
    cfg.set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::string text;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  return resolve_config_text(text, overrides);
}

}  // namespace fra
