#include "rattn/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace rattn {

using nlohmann::json;

namespace {

// Reads the members of one JSON object, remembering which keys were used so
// that anything left over can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + " must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json* raw(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename V>
  void read(const std::string& key, V& out) {
    const json* v = raw(key);
    if (v == nullptr) return;
    out = convert<V>(*v, key_path(key));
  }

  template <typename V>
  static V convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<V, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + " must be true or false");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<V, std::string>) {
      if (!v.is_string()) throw ConfigError(where + " must be a string");
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!v.is_number()) throw ConfigError(where + " must be a number");
      return v.get<V>();
    } else if constexpr (std::is_unsigned_v<V>) {
      if (!v.is_number_unsigned()) throw ConfigError(where + " must be a nonnegative integer");
      return v.get<V>();
    } else if constexpr (std::is_integral_v<V>) {
      if (!v.is_number_integer()) throw ConfigError(where + " must be an integer");
      return v.get<V>();
    } else {
      // std::vector of one of the above
      if (!v.is_array()) throw ConfigError(where + " must be an array");
      V out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename V::value_type>(v[i], where + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (used_.count(it.key()) == 0) throw ConfigError(key_path(it.key()) + ": unknown key");
    }
  }

 private:
  std::string label() const { return path_.empty() ? "config" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

template <typename Fn>
auto rethrow_as(const std::string& key, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind(key, 0) == 0) throw;
    throw ConfigError(key + ": " + msg);
  }
}

void read_model(Section& s, ModelSpec& spec) {
  int variant = spec.variant;
  std::string mode = to_string(spec.mode);
  std::size_t reduction = spec.reduction_ratio, classes = spec.num_classes;
  s.read("variant", variant);
  s.read("mode", mode);
  s.read("reduction_ratio", reduction);
  s.read("num_classes", classes);
  const ModelMode m = rethrow_as(s.key_path("mode"), [&] { return parse_mode(mode); });
  // Head placement and routing fall back to the mode's defaults unless given.
  ModelSpec out = ModelSpec::make(variant, m, reduction, classes);
  out.aux_dropout = spec.aux_dropout;
  out.width = spec.width;
  out.detach_aux_into_attention = spec.detach_aux_into_attention;
  out.stem = spec.stem;
  out.attention_input = spec.attention_input;

  if (s.has("aux_positions")) {
    s.read("aux_positions", out.aux_positions);
    out.routing.clear();
    if (m == ModelMode::SeR) {
      for (int p : out.aux_positions) out.routing[p] = {p + 1};
    }
  }
  if (const json* r = s.raw("routing")) {
    const std::string where = s.key_path("routing");
    if (!r->is_object()) throw ConfigError(where + " must be an object mapping aux stage to target stages");
    out.routing.clear();
    for (auto it = r->begin(); it != r->end(); ++it) {
      int source = 0;
      try {
        std::size_t used = 0;
        source = std::stoi(it.key(), &used);
        if (used != it.key().size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ConfigError(where + ": key '" + it.key() + "' is not a stage number");
      }
      const auto targets = Section::convert<std::vector<int>>(it.value(), where + "." + it.key());
      out.routing[source] = std::set<int>(targets.begin(), targets.end());
    }
  }
  s.read("aux_dropout", out.aux_dropout);
  s.read("width", out.width);
  s.read("detach_aux_into_attention", out.detach_aux_into_attention);
  std::string stem = to_string(out.stem), input = to_string(out.attention_input);
  s.read("stem", stem);
  s.read("attention_input", input);
  out.stem = rethrow_as(s.key_path("stem"), [&] { return parse_stem(stem); });
  out.attention_input = rethrow_as(s.key_path("attention_input"), [&] { return parse_attention_input(input); });
  s.finish();
  spec = out;
}

void read_augment(Section& s, AugmentConfig& a) {
  s.read("crop", a.crop);
  s.read("pad", a.pad);
  s.read("flip", a.flip);
  s.read("rotate", a.rotate);
  s.read("max_degrees", a.max_degrees);
  s.finish();
}

void read_train(Section& s, TrainConfig& t) {
  s.read("epochs", t.epochs);
  s.read("batch_size", t.batch_size);
  s.read("eval_batch_size", t.eval_batch_size);
  s.read("base_lr", t.base_lr);
  s.read("decay_epochs", t.decay_epochs);
  s.read("decay_factor", t.decay_factor);
  s.read("weight_decay", t.weight_decay);
  s.read("momentum", t.momentum);
  s.read("nesterov", t.nesterov);
  s.read("warmup_epochs", t.warmup_epochs);
  s.read("decay_norm", t.decay_norm);
  s.read("checkpoint_every", t.checkpoint_every);
  if (const json* a = s.raw("augment")) {
    Section as(*a, s.key_path("augment"));
    read_augment(as, t.augment);
  }
  s.finish();
}

constexpr std::size_t kMaxLossWeights = 3;

// loss.w1 .. loss.wK; returns the weights that were present, in order.
std::vector<double> read_loss(Section& s) {
  std::vector<double> w;
  std::size_t highest = 0;
  for (std::size_t k = 1; k <= kMaxLossWeights; ++k) {
    if (s.has("w" + std::to_string(k))) highest = k;
  }
  for (std::size_t k = 1; k <= highest; ++k) {
    const std::string key = "w" + std::to_string(k);
    if (!s.has(key)) throw ConfigError(s.key_path(key) + " is missing while a later weight is given");
    double v = 0.0;
    s.read(key, v);
    w.push_back(v);
  }
  s.finish();
  return w;
}

}  // namespace

LossWeights default_loss_weights(const ModelSpec& spec) {
  return LossWeights{std::vector<double>(spec.aux_positions.size(), 0.3)};
}

RunConfig RunConfig::defaults() { return parse_config("{}"); }

void RunConfig::validate() const {
  model.validate();
  train.validate();
  const std::size_t heads = model.aux_positions.size();
  if (train.loss.aux.size() != heads) {
    const std::size_t k = train.loss.aux.size();
    const std::string key = "loss.w" + std::to_string(std::max(k, heads));
    throw ConfigError(key + ": " + std::to_string(k) + " loss weight(s) given for " + std::to_string(heads) +
                      " auxiliary head(s)");
  }
  if (train.seed != seed) throw ConfigError("seed: train seed and run seed disagree");
}

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  Section root(j, "");
  RunConfig cfg;
  if (const json* m = root.raw("model")) {
    Section s(*m, "model");
    read_model(s, cfg.model);
  }
  std::vector<double> weights;
  bool weights_given = false;
  if (const json* l = root.raw("loss")) {
    Section s(*l, "loss");
    weights = read_loss(s);
    weights_given = !weights.empty();
  }
  if (const json* t = root.raw("train")) {
    Section s(*t, "train");
    read_train(s, cfg.train);
  }
  if (const json* d = root.raw("data")) {
    Section s(*d, "data");
    s.read("root", cfg.data.root);
    s.read("subset", cfg.data.subset);
    s.read("test_subset", cfg.data.test_subset);
    s.finish();
  }
  if (const json* o = root.raw("output")) {
    Section s(*o, "output");
    s.read("dir", cfg.output_dir);
    s.finish();
  }
  root.read("seed", cfg.seed);
  root.finish();

  cfg.train.seed = cfg.seed;
  cfg.train.loss = weights_given ? LossWeights{weights} : default_loss_weights(cfg.model);
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("config not found: " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(file.string() + ": " + e.what());
  }
}

json model_spec_to_json(const ModelSpec& spec) {
  json routing = json::object();
  for (const auto& [src, targets] : spec.routing) routing[std::to_string(src)] = std::vector<int>(targets.begin(), targets.end());
  return {{"variant", spec.variant},
          {"mode", to_string(spec.mode)},
          {"reduction_ratio", spec.reduction_ratio},
          {"num_classes", spec.num_classes},
          {"aux_positions", spec.aux_positions},
          {"routing", routing},
          {"aux_dropout", spec.aux_dropout},
          {"stem", to_string(spec.stem)},
          {"attention_input", to_string(spec.attention_input)},
          {"detach_aux_into_attention", spec.detach_aux_into_attention},
          {"width", spec.width}};
}

ModelSpec model_spec_from_json(const json& j) {
  Section s(j, "model");
  ModelSpec spec;
  read_model(s, spec);
  spec.validate();
  return spec;
}

json train_config_to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"eval_batch_size", t.eval_batch_size},
          {"base_lr", t.base_lr},
          {"decay_epochs", t.decay_epochs},
          {"decay_factor", t.decay_factor},
          {"weight_decay", t.weight_decay},
          {"momentum", t.momentum},
          {"nesterov", t.nesterov},
          {"warmup_epochs", t.warmup_epochs},
          {"decay_norm", t.decay_norm},
          {"checkpoint_every", t.checkpoint_every},
          {"augment",
           {{"crop", t.augment.crop},
            {"pad", t.augment.pad},
            {"flip", t.augment.flip},
            {"rotate", t.augment.rotate},
            {"max_degrees", t.augment.max_degrees}}},
          {"loss", t.loss.aux}};
}

TrainConfig train_config_from_json(const json& j) {
  json copy = j;
  std::vector<double> loss;
  if (copy.contains("loss")) {
    loss = Section::convert<std::vector<double>>(copy.at("loss"), "train.loss");
    copy.erase("loss");
  }
  Section s(copy, "train");
  TrainConfig t;
  read_train(s, t);
  t.loss.aux = loss;
  t.validate();
  return t;
}

std::string serialize_config(const RunConfig& cfg) {
  json loss = json::object();
  for (std::size_t k = 0; k < cfg.train.loss.aux.size(); ++k) loss["w" + std::to_string(k + 1)] = cfg.train.loss.aux[k];
  json train = train_config_to_json(cfg.train);
  train.erase("loss");
  json j = {{"model", model_spec_to_json(cfg.model)},
            {"loss", loss},
            {"train", train},
            {"data", {{"root", cfg.data.root}, {"subset", cfg.data.subset}, {"test_subset", cfg.data.test_subset}}},
            {"output", {{"dir", cfg.output_dir}}},
            {"seed", cfg.seed}};
  return j.dump(2) + "\n";
}

}  // namespace rattn
