#include "rattn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "rattn/config.hpp"

namespace rattn {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'R', 'A', 'T', 'T', 'N', 'C', 'K', 'P'};

template <typename V>
void put(std::ofstream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename V>
V get(std::ifstream& in, const fs::path& file) {
  V v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError(file.string() + ": truncated checkpoint");
  return v;
}

json history_to_json(const TrainingHistory& h) {
  json a = json::array();
  for (const auto& r : h.epochs) {
    a.push_back({{"epoch", r.epoch},
                 {"train_loss", r.train_loss},
                 {"train_err", r.train_err},
                 {"test_err", r.test_err},
                 {"lr", r.lr},
                 {"seconds", r.seconds}});
  }
  return a;
}

TrainingHistory history_from_json(const json& a) {
  TrainingHistory h;
  for (const auto& r : a) {
    h.epochs.push_back({r.at("epoch").get<std::size_t>(), r.at("train_loss").get<double>(),
                        r.at("train_err").get<double>(), r.at("test_err").get<double>(), r.at("lr").get<double>(),
                        r.at("seconds").get<double>()});
  }
  return h;
}

}  // namespace

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void write_checkpoint(const fs::path& file, const Checkpoint& ckpt) {
  json meta;
  meta["spec"] = model_spec_to_json(ckpt.spec);
  meta["train"] = ckpt.train ? train_config_to_json(*ckpt.train) : json(nullptr);
  if (ckpt.train) meta["train"]["seed"] = ckpt.train->seed;
  meta["epoch"] = ckpt.epoch;
  meta["rng"] = ckpt.rng;
  meta["history"] = history_to_json(ckpt.history);
  meta["channel_means"] = ckpt.means ? json(ckpt.means->rgb) : json(nullptr);
  const std::string text = meta.dump();

  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kCheckpointSchema);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    put<std::uint64_t>(out, ckpt.tensors.size());
    for (const auto& [name, t] : ckpt.tensors) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      for (std::size_t d : {t.n(), t.h(), t.w(), t.c()}) put<std::uint64_t>(out, d);
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, file, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + file.string() + ": " + ec.message());
}

Checkpoint read_checkpoint(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("checkpoint not found: " + file.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw IoError(file.string() + ": not a checkpoint (bad magic)");
  }
  const auto schema = get<std::uint32_t>(in, file);
  if (schema != kCheckpointSchema) {
    throw IoError(file.string() + ": checkpoint schema " + std::to_string(schema) + ", this build reads " +
                  std::to_string(kCheckpointSchema));
  }
  const auto len = get<std::uint64_t>(in, file);
  if (len > (1ULL << 30)) throw IoError(file.string() + ": implausible metadata length");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw IoError(file.string() + ": truncated checkpoint");

  Checkpoint ck;
  try {
    const json meta = json::parse(text);
    ck.spec = model_spec_from_json(meta.at("spec"));
    if (!meta.at("train").is_null()) {
      json t = meta.at("train");
      const std::uint64_t seed = t.at("seed").get<std::uint64_t>();
      t.erase("seed");
      ck.train = train_config_from_json(t);
      ck.train->seed = seed;
    }
    ck.epoch = meta.at("epoch").get<std::size_t>();
    ck.rng = meta.at("rng").get<Rng::State>();
    ck.history = history_from_json(meta.at("history"));
    if (!meta.at("channel_means").is_null()) ck.means = ChannelMeans{meta.at("channel_means").get<std::array<double, 3>>()};
  } catch (const json::exception& e) {
    throw IoError(file.string() + ": bad checkpoint metadata: " + e.what());
  } catch (const ConfigError& e) {
    throw IoError(file.string() + ": bad checkpoint metadata: " + e.what());
  }

  const auto count = get<std::uint64_t>(in, file);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto nlen = get<std::uint32_t>(in, file);
    if (nlen > 4096) throw IoError(file.string() + ": implausible tensor name length");
    std::string name(nlen, '\0');
    if (!in.read(name.data(), nlen)) throw IoError(file.string() + ": truncated checkpoint");
    Shape s;
    s.n = get<std::uint64_t>(in, file);
    s.h = get<std::uint64_t>(in, file);
    s.w = get<std::uint64_t>(in, file);
    s.c = get<std::uint64_t>(in, file);
    if (s.size() > (1ULL << 32)) throw IoError(file.string() + ": implausible shape for " + name);
    Tensor<float> t(s);
    if (!in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)))) {
      throw IoError(file.string() + ": truncated data for " + name);
    }
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

void store_model(Model<float>& model, Checkpoint& ckpt) {
  ckpt.spec = model.spec();
  for (auto* p : model.parameters()) ckpt.tensors.emplace_back(p->name, p->value);
  for (const auto& b : model.buffers()) ckpt.tensors.emplace_back(b.name, *b.tensor);
}

void restore_model(const Checkpoint& ckpt, Model<float>& model) {
  auto load = [&](const std::string& name, Tensor<float>& dst) {
    const Tensor<float>* src = ckpt.find(name);
    if (src == nullptr) throw IoError("checkpoint has no tensor " + name);
    if (!(src->shape() == dst.shape())) {
      throw IoError("checkpoint tensor " + name + " is " + to_string(src->shape()) + ", model expects " +
                    to_string(dst.shape()));
    }
    dst = *src;
  };
  for (auto* p : model.parameters()) load(p->name, p->value);
  for (auto& b : model.buffers()) load(b.name, *b.tensor);
}

Model<float> load_model(const fs::path& file) {
  const Checkpoint ck = read_checkpoint(file);
  Model<float> model(ck.spec);
  restore_model(ck, model);
  return model;
}

}  // namespace rattn
