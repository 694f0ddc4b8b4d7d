#include "branchnet/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace branchnet {

using nlohmann::json;

namespace {

void check_keys(const json& obj, const std::string& section, const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError(section + "." + key + ": unknown key");
  }
}

template <typename T>
void read(const json& obj, const std::string& section, const std::string& key, T& target) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
          throw ConfigError("expected a non-negative integer");
        }
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("expected a string");
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      if (!v.is_array()) throw ConfigError("expected an array of integers");
      for (const auto& e : v) {
        if (!e.is_number_integer()) throw ConfigError("expected an array of integers");
      }
    }
    target = v.get<T>();
  } catch (const ConfigError& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  } catch (const json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

void read_triple(const json& obj, const std::string& section, const std::string& key,
                 std::optional<std::array<double, 3>>& target) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (v.is_null()) {
    target.reset();
    return;
  }
  if (!v.is_array() || v.size() != 3) throw ConfigError(section + "." + key + ": expected null or 3 numbers");
  std::array<double, 3> out{};
  for (int c = 0; c < 3; ++c) {
    if (!v[c].is_number()) throw ConfigError(section + "." + key + ": expected null or 3 numbers");
    out[c] = v[c].get<double>();
  }
  target = out;
}

template <typename Fn>
void validate_section(const std::string& section, Fn&& fn) {
  try {
    fn();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(section + ": " + e.what());
  }
}

json triple_json(const std::optional<std::array<double, 3>>& t) {
  if (!t) return nullptr;
  return json::array({(*t)[0], (*t)[1], (*t)[2]});
}

std::size_t line_of(const std::string& text, std::size_t offset) {
  std::size_t line = 1;
  for (std::size_t i = 0; i < std::min(offset, text.size()); ++i) line += text[i] == '\n';
  return line;
}

/// Best-effort line of the last key named in a "section.key: message" error.
std::optional<std::size_t> locate_key(const std::string& text, const std::string& message) {
  const auto colon = message.find(':');
  if (colon == std::string::npos) return std::nullopt;
  const std::string path = message.substr(0, colon);
  std::size_t from = 0;
  std::size_t start = 0;
  std::optional<std::size_t> found;
  while (start <= path.size()) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    const auto pos = text.find("\"" + key + "\"", from);
    if (pos == std::string::npos) break;
    found = line_of(text, pos);
    from = pos + 1;
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return found;
}

}  // namespace

json to_json(const BranchedNetConfig& m) {
  return {{"stage_blocks", m.stage_blocks},   {"stage_widths", m.stage_widths},
          {"bottleneck", m.bottleneck},       {"branch_after_block", m.branch_after_block},
          {"num_branches", m.num_branches},   {"num_classes", m.num_classes},
          {"input_channels", m.input_channels}, {"input_height", m.input_height},
          {"input_width", m.input_width},     {"stem_width", m.stem_width},
          {"stem_kernel", m.stem_kernel},     {"stem_stride", m.stem_stride},
          {"stem_max_pool", m.stem_max_pool}};
}

BranchedNetConfig model_from_json(const json& j) {
  const std::string s = "model";
  check_keys(j, s,
             {"stage_blocks", "stage_widths", "bottleneck", "branch_after_block", "num_branches", "num_classes",
              "input_channels", "input_height", "input_width", "stem_width", "stem_kernel", "stem_stride",
              "stem_max_pool"});
  BranchedNetConfig m;
  read(j, s, "stage_blocks", m.stage_blocks);
  read(j, s, "stage_widths", m.stage_widths);
  read(j, s, "bottleneck", m.bottleneck);
  read(j, s, "branch_after_block", m.branch_after_block);
  read(j, s, "num_branches", m.num_branches);
  read(j, s, "num_classes", m.num_classes);
  read(j, s, "input_channels", m.input_channels);
  read(j, s, "input_height", m.input_height);
  read(j, s, "input_width", m.input_width);
  read(j, s, "stem_width", m.stem_width);
  read(j, s, "stem_kernel", m.stem_kernel);
  read(j, s, "stem_stride", m.stem_stride);
  read(j, s, "stem_max_pool", m.stem_max_pool);
  validate_section(s, [&] { m.validate(); });
  return m;
}

ExperimentConfig experiment_from_json(const json& j) {
  check_keys(j, "config", {"model", "train", "augment", "data", "output_dir"});
  ExperimentConfig c;
  if (j.contains("model")) c.model = model_from_json(j.at("model"));

  if (j.contains("train")) {
    const json& t = j.at("train");
    const std::string s = "train";
    check_keys(t, s,
               {"batch_size", "total_epochs", "base_lr", "lr_decay_factor", "lr_decay_interval_epochs",
                "weight_decay", "momentum", "smoothing_epsilon", "seed"});
    read(t, s, "batch_size", c.train.batch_size);
    read(t, s, "total_epochs", c.train.total_epochs);
    read(t, s, "base_lr", c.train.base_lr);
    read(t, s, "lr_decay_factor", c.train.lr_decay_factor);
    read(t, s, "lr_decay_interval_epochs", c.train.lr_decay_interval_epochs);
    read(t, s, "weight_decay", c.train.weight_decay);
    read(t, s, "momentum", c.train.momentum);
    read(t, s, "smoothing_epsilon", c.train.smoothing_epsilon);
    read(t, s, "seed", c.train.seed);
  }
  c.train.num_classes = c.model.num_classes;

  if (j.contains("augment")) {
    const json& a = j.at("augment");
    const std::string s = "augment";
    check_keys(a, s,
               {"crop_height", "crop_width", "flip_probability", "pca_sigma", "brightness", "saturation",
                "contrast", "enable_crop", "enable_flip", "enable_jitter", "enable_pca", "enable_normalize",
                "channel_means", "channel_stds"});
    read(a, s, "crop_height", c.augment.crop_height);
    read(a, s, "crop_width", c.augment.crop_width);
    read(a, s, "flip_probability", c.augment.flip_probability);
    read(a, s, "pca_sigma", c.augment.pca_sigma);
    read(a, s, "brightness", c.augment.jitter.brightness);
    read(a, s, "saturation", c.augment.jitter.saturation);
    read(a, s, "contrast", c.augment.jitter.contrast);
    read(a, s, "enable_crop", c.augment.enable_crop);
    read(a, s, "enable_flip", c.augment.enable_flip);
    read(a, s, "enable_jitter", c.augment.enable_jitter);
    read(a, s, "enable_pca", c.augment.enable_pca);
    read(a, s, "enable_normalize", c.augment.enable_normalize);
    read_triple(a, s, "channel_means", c.augment.channel_means);
    read_triple(a, s, "channel_stds", c.augment.channel_stds);
  }

  if (j.contains("data")) {
    const json& d = j.at("data");
    const std::string s = "data";
    check_keys(d, s,
               {"kind", "directory", "max_train", "max_test", "num_classes", "samples_per_class", "image_size",
                "noise_std", "label_noise", "signal_strength", "test_samples_per_class", "seed"});
    read(d, s, "kind", c.data.kind);
    read(d, s, "directory", c.data.directory);
    read(d, s, "max_train", c.data.max_train);
    read(d, s, "max_test", c.data.max_test);
    read(d, s, "num_classes", c.data.synthetic.num_classes);
    read(d, s, "samples_per_class", c.data.synthetic.samples_per_class);
    read(d, s, "image_size", c.data.synthetic.image_size);
    read(d, s, "noise_std", c.data.synthetic.noise_std);
    read(d, s, "label_noise", c.data.synthetic.label_noise);
    read(d, s, "signal_strength", c.data.synthetic.signal_strength);
    read(d, s, "test_samples_per_class", c.data.test_samples_per_class);
    read(d, s, "seed", c.data.seed);
  }
  read(j, "config", "output_dir", c.output_dir);
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  validate_section("model", [&] { model.validate(); });
  validate_section("train", [&] { train.validate(); });
  validate_section("augment", [&] { augment.validate(); });
  if (model.input_channels != 3) throw ConfigError("model.input_channels: RGB data requires 3 channels");
  if (augment.crop_height != model.input_height) {
    throw ConfigError("augment.crop_height: " + std::to_string(augment.crop_height) +
                      " does not match model.input_height " + std::to_string(model.input_height));
  }
  if (augment.crop_width != model.input_width) {
    throw ConfigError("augment.crop_width: " + std::to_string(augment.crop_width) +
                      " does not match model.input_width " + std::to_string(model.input_width));
  }
  int source_size = 0;
  int classes = 0;
  if (data.kind == "synthetic") {
    source_size = data.synthetic.image_size;
    classes = data.synthetic.num_classes;
    if (data.synthetic.samples_per_class < 1) throw ConfigError("data.samples_per_class: must be positive");
    if (data.test_samples_per_class < 1) throw ConfigError("data.test_samples_per_class: must be positive");
    if (data.synthetic.noise_std < 0.0) throw ConfigError("data.noise_std: must be non-negative");
    if (!(data.synthetic.label_noise >= 0.0 && data.synthetic.label_noise <= 1.0)) {
      throw ConfigError("data.label_noise: must lie in [0, 1]");
    }
    if (!(data.synthetic.signal_strength >= 0.0 && data.synthetic.signal_strength <= 1.0)) {
      throw ConfigError("data.signal_strength: must lie in [0, 1]");
    }
  } else if (data.kind == "cifar10") {
    source_size = kCifarSide;
    classes = kCifarClasses;
    if (data.directory.empty()) throw ConfigError("data.directory: required for cifar10");
    if (data.max_train < 1 || data.max_test < 1) throw ConfigError("data.max_train: limits must be positive");
  } else {
    throw ConfigError("data.kind: expected \"synthetic\" or \"cifar10\", got \"" + data.kind + "\"");
  }
  if (classes != model.num_classes) {
    throw ConfigError("model.num_classes: " + std::to_string(model.num_classes) + " but the data has " +
                      std::to_string(classes) + " classes");
  }
  if (augment.crop_height > source_size || augment.crop_width > source_size) {
    throw ConfigError("augment.crop_height: crop larger than the " + std::to_string(source_size) + "px source images");
  }
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["model"] = to_json(c.model);
  j["train"] = {{"batch_size", c.train.batch_size},
                {"total_epochs", c.train.total_epochs},
                {"base_lr", c.train.base_lr},
                {"lr_decay_factor", c.train.lr_decay_factor},
                {"lr_decay_interval_epochs", c.train.lr_decay_interval_epochs},
                {"weight_decay", c.train.weight_decay},
                {"momentum", c.train.momentum},
                {"smoothing_epsilon", c.train.smoothing_epsilon},
                {"seed", c.train.seed}};
  j["augment"] = {{"crop_height", c.augment.crop_height},
                  {"crop_width", c.augment.crop_width},
                  {"flip_probability", c.augment.flip_probability},
                  {"pca_sigma", c.augment.pca_sigma},
                  {"brightness", c.augment.jitter.brightness},
                  {"saturation", c.augment.jitter.saturation},
                  {"contrast", c.augment.jitter.contrast},
                  {"enable_crop", c.augment.enable_crop},
                  {"enable_flip", c.augment.enable_flip},
                  {"enable_jitter", c.augment.enable_jitter},
                  {"enable_pca", c.augment.enable_pca},
                  {"enable_normalize", c.augment.enable_normalize},
                  {"channel_means", triple_json(c.augment.channel_means)},
                  {"channel_stds", triple_json(c.augment.channel_stds)}};
  j["data"] = {{"kind", c.data.kind},
               {"directory", c.data.directory},
               {"max_train", c.data.max_train},
               {"max_test", c.data.max_test},
               {"num_classes", c.data.synthetic.num_classes},
               {"samples_per_class", c.data.synthetic.samples_per_class},
               {"image_size", c.data.synthetic.image_size},
               {"noise_std", c.data.synthetic.noise_std},
               {"label_noise", c.data.synthetic.label_noise},
               {"signal_strength", c.data.synthetic.signal_strength},
               {"test_samples_per_class", c.data.test_samples_per_class},
               {"seed", c.data.seed}};
  j["output_dir"] = c.output_dir;
  return j;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set " + assignment + ": expected section.key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("--set " + assignment + ": empty key");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key)) (*node)[key] = json::object();
    node = &(*node)[key];
    if (!node->is_object()) throw ConfigError("--set " + assignment + ": " + key + " is not a section");
    start = dot + 1;
  }
}

ExperimentConfig load_experiment(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto line = line_of(text, e.byte > 0 ? e.byte - 1 : 0);
    throw ConfigError(path.string() + ":" + std::to_string(line) + ": JSON syntax error: " + e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  try {
    return experiment_from_json(j);
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    const auto line = locate_key(text, msg);
    throw ConfigError(path.string() + (line ? ":" + std::to_string(*line) : std::string()) + ": " + msg);
  }
}

std::string config_fingerprint(const ExperimentConfig& config) {
  const std::string text = to_json(config).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string first_model_difference(const BranchedNetConfig& a, const BranchedNetConfig& b) {
  const json ja = to_json(a), jb = to_json(b);
  for (const auto& [key, value] : ja.items()) {
    if (jb.at(key) != value) return "model." + key;
  }
  return {};
}

Dataset load_training_set(const DataConfig& data) {
  if (data.kind == "cifar10") {
    return load_cifar10_binary(data.directory, Split::train, static_cast<std::size_t>(data.max_train));
  }
  return generate_synthetic(data.synthetic, data.seed, "train");
}

Dataset load_test_set(const DataConfig& data) {
  if (data.kind == "cifar10") {
    return load_cifar10_binary(data.directory, Split::test, static_cast<std::size_t>(data.max_test));
  }
  SyntheticSpec spec = data.synthetic;
  spec.samples_per_class = data.test_samples_per_class;
  spec.label_noise = 0.0;
  return generate_synthetic(spec, data.seed, "test");
}

Checkpoint make_checkpoint(const ExperimentConfig& config, const BranchedNetwork& net, const TrainState& state) {
  json header;
  header["config"] = to_json(config);
  header["next_epoch"] = state.next_epoch;
  header["rng"] = {{"seed", config.train.seed}, {"next_epoch", state.next_epoch}};
  json history = json::array();
  for (const auto& e : state.history.epochs) {
    history.push_back({{"epoch", e.epoch}, {"lr", e.learning_rate}, {"branch_loss", e.branch_loss}});
  }
  header["history"] = history;

  Checkpoint ck;
  ck.version = kCheckpointVersion;
  ck.header_json = header.dump();
  for (const auto& entry : net.registry()) {
    ck.tensors.push_back({entry.name, entry.tensor.shape(), {entry.tensor.data().begin(), entry.tensor.data().end()}});
  }
  for (std::size_t i = 0; i < state.optimizer.velocity.size(); ++i) {
    const auto& v = state.optimizer.velocity[i];
    ck.tensors.push_back(
        {"optim.velocity." + state.optimizer.names[i], v.shape(), {v.data().begin(), v.data().end()}});
  }
  return ck;
}

RestoredRun restore_checkpoint(const Checkpoint& ck) {
  json header;
  try {
    header = json::parse(ck.header_json);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  ExperimentConfig config = experiment_from_json(header.at("config"));
  BranchedNetwork net = build_branched_net(config.model, config.train.seed);
  for (const auto& entry : net.registry()) {
    const auto* saved = ck.find(entry.name);
    if (!saved) throw FormatError("checkpoint is missing tensor " + entry.name);
    if (saved->shape != entry.tensor.shape()) {
      throw FormatError("checkpoint tensor " + entry.name + " has shape " + to_string(saved->shape) + ", expected " +
                        to_string(entry.tensor.shape()));
    }
    Tensor target = entry.tensor;
    std::copy(saved->values.begin(), saved->values.end(), target.data().begin());
  }

  TrainState state;
  state.next_epoch = header.at("next_epoch").get<int>();
  const auto params = net.parameters();
  state.optimizer = OptimizerState::zeros_like(params);
  bool any_velocity = false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* saved = ck.find("optim.velocity." + params[i].name);
    if (!saved) continue;
    any_velocity = true;
    if (saved->shape != params[i].tensor.shape()) {
      throw FormatError("checkpoint velocity for " + params[i].name + " has the wrong shape");
    }
    std::copy(saved->values.begin(), saved->values.end(), state.optimizer.velocity[i].data().begin());
  }
  if (!any_velocity) state.optimizer = {};
  for (const auto& e : header.value("history", json::array())) {
    EpochRecord r;
    r.epoch = e.at("epoch").get<int>();
    r.learning_rate = e.at("lr").get<double>();
    r.branch_loss = e.at("branch_loss").get<std::vector<double>>();
    state.history.epochs.push_back(r);
  }
  return {std::move(config), std::move(net), std::move(state)};
}

}  // namespace branchnet
