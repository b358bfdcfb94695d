#include "mapkd/config.hpp"

#include <fstream>

#include "json.hpp"
#include <sstream>

namespace mapkd {

using nlohmann::json;

double Schedule::at(int epoch) const {
  double v = initial;
  for (const Event& e : events) {
    if (e.epoch > epoch) break;
    v = e.multiply ? v * e.value : e.value;
  }
  return v;
}

void Schedule::validate() const {
  if (initial < 0.0) throw ConfigError("schedule values must be non-negative");
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i].epoch < 0) throw ConfigError("schedule event epochs must be non-negative");
    if (i > 0 && events[i].epoch <= events[i - 1].epoch) {
      throw ConfigError("schedule event epochs must be strictly increasing");
    }
    if (events[i].value < 0.0) throw ConfigError("schedule values must be non-negative");
  }
}

SchedulePair schedule_preset(const std::string& name) {
  using E = Schedule::Event;
  if (name == "hivt-paper") {
    return {{10.0, {E{10, false, 0.1}}}, {1.0, {E{10, true, 0.1}, E{20, true, 0.1}, E{40, true, 0.1}}}};
  }
  if (name == "desk") {
    return {{10.0, {E{5, false, 0.1}}}, {1.0, {E{5, true, 0.1}, E{10, true, 0.1}, E{20, true, 0.1}}}};
  }
  if (name == "vectornet") return {{1.0, {E{10, false, 0.1}}}, {50.0, {E{10, false, 0.1}}}};
  if (name == "lanegcn") return {{10.0, {E{30, false, 0.01}}}, {1.0, {E{30, false, 0.001}}}};
  throw ConfigError("unknown schedule preset " + name);
}

TrainConfig default_train_config() {
  TrainConfig t;
  const SchedulePair sp = schedule_preset("desk");
  t.lambda_fd = sp.lambda_fd;
  t.lambda_od = sp.lambda_od;
  return t;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (final_lr_fraction < 0.0 || final_lr_fraction > 1.0) throw ConfigError("final_lr_fraction must lie in [0,1]");
  if (weight_decay < 0.0 || !(clip_norm > 0.0)) throw ConfigError("weight decay and clip norm must be positive");
  if (history_length < 1) throw ConfigError("history length must be positive");
  if (eval_every < 0) throw ConfigError("eval_every must be non-negative");
  lambda_fd.validate();
  lambda_od.validate();
}

void ExperimentConfig::validate() const {
  if (train_scenes < 1 || eval_scenes < 1) throw ConfigError("scene counts must be positive");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (world.t_obs != model.t_obs || world.t_pred != model.t_pred) {
    throw ConfigError("world and model horizons differ");
  }
  if (train.history_length > model.t_obs) throw ConfigError("history length exceeds t_obs");
  for (int h : history_lengths)
    if (h < 1 || h > model.t_obs) throw ConfigError("history lengths must lie in [1, t_obs]");
  for (int k : eval_k)
    if (k < 1 || k > model.modes) throw ConfigError("eval K exceeds the decoder modes");
  for (int k : kscan_k)
    if (k < 1) throw ConfigError("kscan K must be positive");
  try {
    model.validate();
    loss.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  train.validate();
}

namespace {

json schedule_json(const Schedule& s) {
  json ev = json::array();
  for (const auto& e : s.events) ev.push_back({{"epoch", e.epoch}, {"multiply", e.multiply}, {"value", e.value}});
  return {{"initial", s.initial}, {"events", ev}};
}

Schedule schedule_from(const json& j) {
  if (j.is_number()) return Schedule::constant(j.get<double>());
  Schedule s;
  s.initial = j.at("initial").get<double>();
  for (const auto& e : j.at("events")) {
    s.events.push_back({e.at("epoch").get<int>(), e.at("multiply").get<bool>(), e.at("value").get<double>()});
  }
  return s;
}

template <class T, std::size_t N>
std::array<T, N> array_from(const json& j) {
  if (!j.is_array() || j.size() != N) throw ConfigError("expected an array of " + std::to_string(N) + " values");
  std::array<T, N> a{};
  for (std::size_t i = 0; i < N; ++i) a[i] = j[i].get<T>();
  return a;
}

bool is_schedule(const json& j) { return j.is_object() && j.contains("initial") && j.contains("events"); }

// Checks that every key in `user` exists in `schema` with a compatible type.
void check_against(const json& schema, const json& user, const std::string& path) {
  if (schema.is_object()) {
    if (is_schedule(schema) && user.is_number()) return;
    if (!user.is_object()) throw ConfigError("'" + path + "' must be an object");
    for (const auto& [key, value] : user.items()) {
      const std::string sub = path.empty() ? key : path + "." + key;
      if (!schema.contains(key)) throw ConfigError("unknown config key '" + sub + "'");
      check_against(schema.at(key), value, sub);
    }
    return;
  }
  const bool ok = (schema.is_boolean() && user.is_boolean()) ||
                  (schema.is_number_float() && user.is_number()) ||
                  (schema.is_number_integer() && user.is_number_integer()) ||
                  (schema.is_string() && user.is_string()) || (schema.is_array() && user.is_array()) ||
                  (schema.is_null() && user.is_null());
  if (!ok) {
    throw ConfigError("config key '" + path + "' expects " + std::string(schema.type_name()) + ", got " +
                      std::string(user.type_name()));
  }
}

void apply_override(json& user, const json& schema, const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + text + "' is not key=value");
  const std::string key = text.substr(0, eq);
  const std::string raw = text.substr(eq + 1);
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);

  const json* node = &schema;
  for (const auto& p : parts) {
    if (!node->is_object() || !node->contains(p)) throw ConfigError("unknown config key '" + key + "'");
    node = &node->at(p);
  }
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded() || (node->is_string() && !value.is_string())) value = raw;
  check_against(*node, value, key);

  json* target = &user;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    json& next = (*target)[parts[i]];
    if (next.is_null()) next = json::object();
    target = &next;
  }
  (*target)[parts.back()] = value;
}

void merge(json& base, const json& patch) {
  for (const auto& [key, value] : patch.items()) {
    if (value.is_object() && base.contains(key) && base[key].is_object() && !is_schedule(value)) {
      merge(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

}  // namespace

namespace {

json to_json(const ExperimentConfig& c) {
  const auto& m = c.world.map;
  const auto& s = c.world.sim;
  json taps = json::array();
  for (auto t : c.model.taps) taps.push_back(std::string(nets::tap_name(t)));
  return {
      {"world",
       {{"extent_x", m.extent_x},
        {"extent_y", m.extent_y},
        {"lane_spacing", m.lane_spacing},
        {"spacing_jitter", m.spacing_jitter},
        {"intersection_density", m.intersection_density},
        {"min_turn_radius", m.min_turn_radius},
        {"max_turn_radius", m.max_turn_radius},
        {"lane_offset", m.lane_offset},
        {"control_probability", m.control_probability},
        {"sample_spacing", m.sample_spacing},
        {"min_bend", m.min_bend},
        {"max_bend", m.max_bend},
        {"min_bend_radius", m.min_bend_radius},
        {"agents", s.agents},
        {"noise_std", s.noise_std},
        {"min_speed", s.min_speed},
        {"max_speed", s.max_speed},
        {"accel", s.accel},
        {"decel", s.decel},
        {"lateral_accel", s.lateral_accel},
        {"turn_probs", s.turn_probs},
        {"min_wait", s.min_wait},
        {"max_wait", s.max_wait},
        {"spawn_radius", s.spawn_radius},
        {"t_obs", c.world.t_obs},
        {"t_pred", c.world.t_pred},
        {"behavior_mix", c.world.behavior_mix},
        {"max_target_attempts", c.world.max_target_attempts},
        {"context_radius", c.world.context_radius},
        {"include_map", c.world.include_map}}},
      {"data", {{"train_scenes", c.train_scenes}, {"eval_scenes", c.eval_scenes}}},
      {"model",
       {{"hidden", c.model.hidden},
        {"modes", c.model.modes},
        {"decoder", std::string(nets::decoder_name(c.model.decoder))},
        {"taps", taps},
        {"max_agents", c.model.max_agents},
        {"max_segments", c.model.max_segments},
        {"segment_points", c.model.segment_points},
        {"goal_count", c.model.goal_count},
        {"goal_reach", c.model.goal_reach}}},
      {"loss",
       {{"temperature", c.loss.temperature},
        {"samples", c.loss.samples},
        {"sample_seed", c.loss.sample_seed},
        {"density", std::string(losses::density_name(c.loss.density))},
        {"z", c.loss.z},
        {"top_n", c.loss.top_n}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"learning_rate", c.train.learning_rate},
        {"final_lr_fraction", c.train.final_lr_fraction},
        {"weight_decay", c.train.weight_decay},
        {"clip_norm", c.train.clip_norm},
        {"seed", c.train.seed},
        {"lambda_fd", schedule_json(c.train.lambda_fd)},
        {"lambda_od", schedule_json(c.train.lambda_od)},
        {"history_length", c.train.history_length},
        {"eval_every", c.train.eval_every},
        {"checkpoint", c.train.checkpoint},
        {"always_compute_distill_terms", c.train.always_compute_distill_terms}}},
      {"experiment",
       {{"schedule_preset", c.schedule_preset},
        {"seeds", c.seeds},
        {"eval_k", c.eval_k},
        {"kscan_k", c.kscan_k},
        {"history_lengths", c.history_lengths}}},
  };
}

ExperimentConfig config_from_json(const json& j) {
  try {
    ExperimentConfig c;
    const json& w = j.at("world");
    auto& m = c.world.map;
    auto& s = c.world.sim;
    m.extent_x = w.at("extent_x").get<double>();
    m.extent_y = w.at("extent_y").get<double>();
    m.lane_spacing = w.at("lane_spacing").get<double>();
    m.spacing_jitter = w.at("spacing_jitter").get<double>();
    m.intersection_density = w.at("intersection_density").get<double>();
    m.min_turn_radius = w.at("min_turn_radius").get<double>();
    m.max_turn_radius = w.at("max_turn_radius").get<double>();
    m.lane_offset = w.at("lane_offset").get<double>();
    m.control_probability = w.at("control_probability").get<double>();
    m.sample_spacing = w.at("sample_spacing").get<double>();
    m.min_bend = w.at("min_bend").get<double>();
    m.max_bend = w.at("max_bend").get<double>();
    m.min_bend_radius = w.at("min_bend_radius").get<double>();
    s.agents = w.at("agents").get<int>();
    s.noise_std = w.at("noise_std").get<double>();
    s.min_speed = w.at("min_speed").get<double>();
    s.max_speed = w.at("max_speed").get<double>();
    s.accel = w.at("accel").get<double>();
    s.decel = w.at("decel").get<double>();
    s.lateral_accel = w.at("lateral_accel").get<double>();
    s.turn_probs = array_from<double, 3>(w.at("turn_probs"));
    s.min_wait = w.at("min_wait").get<double>();
    s.max_wait = w.at("max_wait").get<double>();
    s.spawn_radius = w.at("spawn_radius").get<double>();
    c.world.t_obs = w.at("t_obs").get<int>();
    c.world.t_pred = w.at("t_pred").get<int>();
    s.steps = c.world.t_obs + c.world.t_pred;
    c.world.behavior_mix = array_from<double, 4>(w.at("behavior_mix"));
    c.world.max_target_attempts = w.at("max_target_attempts").get<int>();
    c.world.context_radius = w.at("context_radius").get<double>();
    c.world.include_map = w.at("include_map").get<bool>();

    c.train_scenes = j.at("data").at("train_scenes").get<int>();
    c.eval_scenes = j.at("data").at("eval_scenes").get<int>();

    const json& md = j.at("model");
    c.model.hidden = md.at("hidden").get<int>();
    c.model.modes = md.at("modes").get<int>();
    c.model.decoder = nets::parse_decoder(md.at("decoder").get<std::string>());
    c.model.taps.clear();
    for (const auto& t : md.at("taps")) c.model.taps.push_back(nets::parse_tap(t.get<std::string>()));
    c.model.max_agents = md.at("max_agents").get<int>();
    c.model.max_segments = md.at("max_segments").get<int>();
    c.model.segment_points = md.at("segment_points").get<int>();
    c.model.goal_count = md.at("goal_count").get<int>();
    c.model.goal_reach = md.at("goal_reach").get<double>();
    c.model.t_obs = c.world.t_obs;
    c.model.t_pred = c.world.t_pred;

    const json& l = j.at("loss");
    c.loss.temperature = l.at("temperature").get<double>();
    c.loss.samples = l.at("samples").get<int>();
    c.loss.sample_seed = l.at("sample_seed").get<std::uint64_t>();
    c.loss.density = losses::parse_density(l.at("density").get<std::string>());
    c.loss.z = l.at("z").get<double>();
    c.loss.top_n = l.at("top_n").get<int>();

    const json& t = j.at("train");
    c.train.epochs = t.at("epochs").get<int>();
    c.train.batch_size = t.at("batch_size").get<int>();
    c.train.learning_rate = t.at("learning_rate").get<double>();
    c.train.final_lr_fraction = t.at("final_lr_fraction").get<double>();
    c.train.weight_decay = t.at("weight_decay").get<double>();
    c.train.clip_norm = t.at("clip_norm").get<double>();
    c.train.seed = t.at("seed").get<std::uint64_t>();
    c.train.lambda_fd = schedule_from(t.at("lambda_fd"));
    c.train.lambda_od = schedule_from(t.at("lambda_od"));
    c.train.history_length = t.at("history_length").get<int>();
    c.train.eval_every = t.at("eval_every").get<int>();
    c.train.checkpoint = t.at("checkpoint").get<std::string>();
    c.train.always_compute_distill_terms = t.at("always_compute_distill_terms").get<bool>();
    // lambda weights live in the schedules; the loss config mirrors the initial values
    c.loss.lambda_fd = c.train.lambda_fd.initial;
    c.loss.lambda_od = c.train.lambda_od.initial;

    const json& e = j.at("experiment");
    c.schedule_preset = e.at("schedule_preset").get<std::string>();
    c.seeds = e.at("seeds").get<std::vector<std::uint64_t>>();
    c.eval_k = e.at("eval_k").get<std::vector<int>>();
    c.kscan_k = e.at("kscan_k").get<std::vector<int>>();
    c.history_lengths = e.at("history_lengths").get<std::vector<int>>();
    c.validate();
    return c;
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("bad config: ") + ex.what());
  } catch (const nets::ModelError& ex) {
    throw ConfigError(ex.what());
  } catch (const losses::LossError& ex) {
    throw ConfigError(ex.what());
  }
}

ExperimentConfig resolve(json user, std::span<const std::string> overrides) {
  const ExperimentConfig defaults;
  json schema = to_json(defaults);
  check_against(schema, user, "");
  for (const auto& o : overrides) apply_override(user, schema, o);

  std::string preset = defaults.schedule_preset;
  if (user.contains("experiment") && user["experiment"].contains("schedule_preset")) {
    preset = user["experiment"]["schedule_preset"].get<std::string>();
  }
  const SchedulePair sp = schedule_preset(preset);
  json merged = schema;
  merged["train"]["lambda_fd"] = schedule_json(sp.lambda_fd);
  merged["train"]["lambda_od"] = schedule_json(sp.lambda_od);
  merge(merged, user);
  return config_from_json(merged);
}

}  // namespace

ExperimentConfig load_config_text(const std::string& text, std::span<const std::string> overrides) {
  json user = json::object();
  if (!text.empty()) {
    try {
      user = json::parse(text);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
  }
  return resolve(std::move(user), overrides);
}

ExperimentConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides) {
  if (path.empty()) return load_config_text("", overrides);
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return load_config_text(ss.str(), overrides);
}

std::string config_to_json(const ExperimentConfig& c, int indent) { return to_json(c).dump(indent); }

std::uint64_t config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : to_json(c).dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace mapkd
