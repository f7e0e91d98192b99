// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when
// every criterion passes. All tolerances are the constants below.
//
//   acceptance --cli PATH [--data DIR] [--work DIR] [--only N,...]
//
// Criteria 7 and 8 need the CIFAR-100 binaries. --data (or RESULT_ATTN_DATA)
// points at real files; without it a synthetic set with the official record
// counts is generated in the work directory.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <regex>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "rattn/analysis.hpp"
#include "rattn/cli.hpp"
#include "rattn/gradcheck.hpp"
#include "rattn/metrics.hpp"
#include "rattn/synthetic.hpp"
#include "rattn/training.hpp"

namespace fs = std::filesystem;
using namespace rattn;

namespace {

// 1
constexpr double kParamRelTol = 0.005;
constexpr double kSe101IncreaseLo = 0.094, kSe101IncreaseHi = 0.098;
// 2
constexpr double kMacRelTol = 0.02;
constexpr double kMacIncreaseTolPoints = 0.3;  // percentage points
// 3
constexpr double kGradRelTol = 1e-4;
constexpr double kGradEpsilon = 1e-6;
// 4
constexpr int kEquivalenceTrials = 100;
// 6
constexpr double kLossTol = 1e-12;
// 9: (0.2, 0.8) are not binary fractions, so the population std of the pair
// lands one ulp above 0.3 in double and ~4.5e-9 above in float.
constexpr double kStdTolDouble = 1e-15;
constexpr double kStdTolFloat = 1e-6;

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

struct Counts {
  std::uint64_t params = 0, macs = 0;
};

// Goes through the same `count` subcommand a user would run.
Counts count_via_cli(int variant, const std::string& mode) {
  std::ostringstream out, err;
  const int code = run_command({"count", "--variant", std::to_string(variant), "--mode", mode, "--r", "8",
                                "--classes", "100"},
                               out, err);
  if (code != 0) throw std::runtime_error("count failed: " + err.str());
  std::smatch m;
  const std::string text = out.str();
  Counts c;
  if (std::regex_search(text, m, std::regex("total params (\\d+)"))) c.params = std::stoull(m[1]);
  if (std::regex_search(text, m, std::regex("total macs +(\\d+)"))) c.macs = std::stoull(m[1]);
  return c;
}

struct Row {
  int variant;
  double se_params_m, ser_params_m, se_macs_g, ser_macs_g, mac_increase_pct;
};
constexpr Row kPublished[] = {{34, 21.655, 26.145, 1.163, 1.169, 0.52},
                              {50, 28.779, 33.531, 1.315, 1.323, 0.61},
                              {101, 52.273, 57.243, 2.538, 2.546, 0.32}};

Outcome criterion1() {
  std::ostringstream d;
  bool ok = true;
  double se101 = 0, ser101 = 0;
  for (const Row& r : kPublished) {
    const double se = count_via_cli(r.variant, "se").params / 1e6, ser = count_via_cli(r.variant, "se_r").params / 1e6;
    const double e1 = std::abs(se - r.se_params_m) / r.se_params_m, e2 = std::abs(ser - r.ser_params_m) / r.ser_params_m;
    ok = ok && e1 <= kParamRelTol && e2 <= kParamRelTol;
    d << fmt("R%g SE %.3fM (off %.3f%%) ", r.variant, se, 100 * e1) << fmt("SE-R %.3fM (off %.3f%%); ", ser, 100 * e2);
    if (r.variant == 101) se101 = se, ser101 = ser;
  }
  const double inc = ser101 / se101 - 1.0;
  ok = ok && inc >= kSe101IncreaseLo && inc <= kSe101IncreaseHi;
  d << fmt("R101 increase %.2f%%", 100 * inc);
  return {ok, d.str()};
}

Outcome criterion2() {
  std::ostringstream d;
  bool ok = true;
  for (const Row& r : kPublished) {
    const double se = count_via_cli(r.variant, "se").macs / 1e9, ser = count_via_cli(r.variant, "se_r").macs / 1e9;
    const double e1 = std::abs(se - r.se_macs_g) / r.se_macs_g, e2 = std::abs(ser - r.ser_macs_g) / r.ser_macs_g;
    const double inc = 100.0 * (ser / se - 1.0);
    const bool row_ok = e1 <= kMacRelTol && e2 <= kMacRelTol && std::abs(inc - r.mac_increase_pct) <= kMacIncreaseTolPoints;
    ok = ok && row_ok;
    d << fmt("R%g SE %.3fG SE-R %.3fG ", r.variant, se, ser) << fmt("(+%.2f%% vs %.2f%%)", inc, r.mac_increase_pct)
      << (r.variant == 101 ? "" : "; ");
  }
  return {ok, d.str()};
}

Outcome criterion3() {
  std::ostringstream d;
  bool ok = true;
  GradCheckDims dims;
  dims.batch = 4;
  dims.channels = 8;
  dims.height = dims.width = 3;
  dims.classes = 4;
  dims.reduction = 2;
  for (auto kind : {BlockKind::Se, BlockKind::SeR, BlockKind::AuxHead}) {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      worst = std::max(worst, gradient_check_detailed(kind, dims, kGradEpsilon, seed).max_relative_error);
    }
    ok = ok && worst < kGradRelTol;
    d << to_string(kind) << " " << fmt("%.2e", worst) << "; ";
  }
  return {ok, d.str()};
}

template <typename T>
bool bitwise(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

Outcome criterion4() {
  int equal = 0, invariant = 0;
  for (int trial = 0; trial < kEquivalenceTrials; ++trial) {
    Rng rng(mix_seed(0xE0, trial));
    const std::size_t c = 1 + rng.below(16), n = 1 + rng.below(4), side = 1 + rng.below(6), extra = 1 + rng.below(10);
    const std::size_t r = 1 + rng.below(4);
    auto fill = [&](Tensor<double>& t, double s) {
      for (auto& v : t.values()) v = rng.uniform(-s, s);
    };
    auto se = ExcitationParams<double>::zeros(c, 0, r);
    fill(se.w1, 2), fill(se.b1, 1), fill(se.w2, 2), fill(se.b2, 1);
    Tensor<double> u({n, side, side, c});
    fill(u, 3);
    equal += bitwise(se_r_block_forward(u, Tensor<double>(), se), se_block_forward(u, se));

    auto ser = ExcitationParams<double>::zeros(c, extra, r);
    fill(ser.w1, 2), fill(ser.b1, 1), fill(ser.w2, 2), fill(ser.b2, 1);
    for (std::size_t h = 0; h < ser.hidden(); ++h)
      for (std::size_t j = 0; j < extra; ++j) ser.w1[h * (extra + c) + j] = 0.0;
    Tensor<double> t1(vec_shape(n, extra)), t2(vec_shape(n, extra));
    fill(t1, 50), fill(t2, 50);
    invariant += bitwise(se_r_block_forward(u, t1, ser), se_r_block_forward(u, t2, ser));
  }
  return {equal == kEquivalenceTrials && invariant == kEquivalenceTrials,
          "n=0 bitwise equal " + std::to_string(equal) + "/" + std::to_string(kEquivalenceTrials) +
              "; T-invariant with zero T-columns " + std::to_string(invariant) + "/" + std::to_string(kEquivalenceTrials)};
}

Outcome criterion5() {
  const TrainConfig cfg;
  const std::size_t spe = 391;  // 50,000 / 128 rounded up
  const double a = lr_at(59, 0, spe, cfg), b = lr_at(60, 0, spe, cfg), c = lr_at(120, 0, spe, cfg),
               e = lr_at(160, 0, spe, cfg);
  bool ok = a == 0.1 && b == 0.02 && c == 0.004 && e == 0.0008;
  bool linear = true;
  for (std::size_t s = 0; s < spe; ++s) {
    const double want = 0.1 * static_cast<double>(s + 1) / static_cast<double>(spe);
    linear = linear && std::abs(lr_at(0, s, spe, cfg) - want) <= 1e-15 &&
             (s == 0 || lr_at(0, s, spe, cfg) > lr_at(0, s - 1, spe, cfg));
  }
  const bool reaches = lr_at(0, spe - 1, spe, cfg) == 0.1;
  ok = ok && linear && reaches;
  return {ok, fmt("59:%.17g 60:%.17g 120:%.17g 160:%.17g", a, b, c, e) + (linear ? "; warmup linear" : "; warmup NOT linear") +
                  (reaches ? ", last warmup step = 0.1" : ", last warmup step != 0.1")};
}

Outcome criterion6() {
  const double v = combine_losses(1.0, {2.0, 3.0}, LossWeights{{0.3, 0.2}});
  Rng rng(6);
  Tensor<double> main(vec_shape(8, 100)), a1(vec_shape(8, 100)), a2(vec_shape(8, 100));
  for (auto* t : {&main, &a1, &a2})
    for (auto& x : t->values()) x = rng.uniform(-4, 4);
  std::vector<int> y;
  for (int i = 0; i < 8; ++i) y.push_back(static_cast<int>(rng.below(100)));
  const double combined = combined_loss(main, {a1, a2}, y, LossWeights{{0.0, 0.0}}).total;
  const double ce = cross_entropy(main, y);
  const bool ok = std::abs(v - 2.2) <= kLossTol && combined == ce;
  return {ok, fmt("w=(0.3,0.2) -> %.17g (|err| %.1e); ", v, std::abs(v - 2.2)) +
                  (combined == ce ? "w=(0,0) equals main CE exactly" : "w=(0,0) DIFFERS from main CE")};
}

fs::path ensure_data(const std::string& flag, const fs::path& work) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("RESULT_ATTN_DATA"); env && *env) return env;
  const fs::path dir = work / "synthetic_cifar100";
  if (!fs::exists(dir / "train.bin") || fs::file_size(dir / "train.bin") != 153700000ULL) {
    std::cerr << "generating synthetic CIFAR-100 files in " << dir << "\n";
    write_synthetic_cifar100(dir, 2024);
  }
  return dir;
}

Outcome criterion7(const fs::path& root) {
  const fs::path file = locate_split(root, Split::Train);
  const auto bytes = fs::file_size(file);
  const auto d = load_cifar100(root, Split::Train);
  std::ifstream in(file, std::ios::binary);
  std::vector<char> first(Cifar100Dataset::kRecordBytes);
  in.read(first.data(), static_cast<std::streamsize>(first.size()));
  const auto rec = serialize_record(d, 0);
  const bool same = std::memcmp(rec.data(), first.data(), rec.size()) == 0;
  const bool ok = bytes == 153700000ULL && d.size() == 50000 && same;
  return {ok, std::to_string(d.size()) + " records from " + std::to_string(bytes) + " bytes; first record " +
                  (same ? "byte-identical" : "DIFFERS") + " (" + file.string() + ")"};
}

std::string slurp(const fs::path& f) {
  std::ifstream in(f, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome criterion8(const std::string& cli, const fs::path& config, const fs::path& root, const fs::path& work) {
  std::string csv[2];
  TrainingHistory h;
  for (int i = 0; i < 2; ++i) {
    const fs::path out = work / ("smoke_run" + std::to_string(i));
    fs::remove_all(out);
    const std::string cmd = "\"" + cli + "\" train --config \"" + config.string() + "\" --data \"" + root.string() +
                            "\" --out \"" + out.string() + "\" --seed 7 --deterministic > \"" +
                            (work / ("smoke_run" + std::to_string(i) + ".log")).string() + "\" 2>&1";
    std::cerr << "criterion 8: run " << i + 1 << " of 2 (log " << (work / ("smoke_run" + std::to_string(i) + ".log")) << ")\n";
    if (std::system(cmd.c_str()) != 0) return {false, "train run " + std::to_string(i + 1) + " failed, see log"};
    csv[i] = slurp(out / "metrics.csv");
    if (i == 0) h = read_metrics_csv(out / "metrics.csv");
  }
  bool finite = true;
  for (const auto& e : h.epochs) finite = finite && std::isfinite(e.train_loss) && std::isfinite(e.test_err);
  bool numbered = h.epochs.size() == 5;
  for (std::size_t i = 0; numbered && i < h.epochs.size(); ++i) numbered = h.epochs[i].epoch == i + 1;
  const bool formed = csv[0].rfind(std::string(kMetricsHeader) + "\n", 0) == 0 && numbered;
  const bool decreased = !h.epochs.empty() && h.epochs.back().train_loss < h.epochs.front().train_loss;
  const bool identical = csv[0] == csv[1];
  const double first = h.epochs.empty() ? 0 : h.epochs.front().train_loss, last = h.epochs.empty() ? 0 : h.epochs.back().train_loss;
  return {finite && formed && decreased && identical,
          fmt("train loss epoch1 %.4f -> epoch5 %.4f", first, last) + (finite ? "; finite" : "; NON-FINITE") +
              (formed ? "; csv well-formed" : "; csv MALFORMED") + (identical ? "; reruns byte-identical" : "; reruns DIFFER")};
}

Outcome criterion9() {
  std::ostringstream d;
  bool ok = true;
  Tensor<double> pair(vec_shape(1, 2), std::vector<double>{0.2, 0.8});
  const double hand = mean_channel_std(pair);
  ok = ok && std::abs(hand - 0.3) <= kStdTolDouble;
  d << fmt("hand case %.17g; ", hand);

  ModelSpec spec = ModelSpec::make(34, ModelMode::SeR, 8, 100);
  spec.width = 8;
  Model<float> m(spec, 1);
  Tensor<float> x({4, 32, 32, 3});
  Rng rng(9);
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-1, 1));
  auto set = [&](int stage, float lo, float hi) {
    for (auto* u : m.attention_units(stage)) {
      u->fc1.weight.value.fill(0), u->fc1.bias.value.fill(0), u->fc2.weight.value.fill(0);
      for (std::size_t c = 0; c < u->channels(); ++c) u->fc2.bias.value[c] = c % 2 ? hi : lo;
    }
  };
  bool zero = true, model_hand = true, coverage = true;
  const float l02 = static_cast<float>(std::log(0.25));
  for (int stage = 1; stage <= 4; ++stage) {
    set(stage, 0.0f, 0.0f);
    const auto z = attention_std_report(m, x, stage);
    for (double v : z.mean_std) zero = zero && v == 0.0;
    coverage = coverage && z.modules.size() == m.plan().blocks[stage - 1];
    set(stage, l02, -l02);
    for (double v : attention_std_report(m, x, stage).mean_std) model_hand = model_hand && std::abs(v - 0.3) <= kStdTolFloat;
  }
  ok = ok && zero && model_hand && coverage;
  d << (zero ? "zero weights -> all 0" : "zero weights -> NONZERO") << "; "
    << (model_hand ? "hand-set model 0.3 per module" : "hand-set model OFF") << "; "
    << (coverage ? "every SE module of stages 1-4 reported" : "module coverage WRONG");
  return {ok, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria", "acceptance"};
  std::string cli, data, work = (fs::temp_directory_path() / "rattn_acceptance").string(), config;
  std::vector<int> only;
  app.add_option("--cli", cli, "path to the result_attn binary")->required();
  app.add_option("--config", config, "training smoke configuration")->required();
  app.add_option("--data", data, "CIFAR-100 binary directory");
  app.add_option("--work", work, "scratch directory");
  app.add_option("--only", only, "run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int k) { return selected.empty() || selected.count(k) > 0; };
  fs::path root;
  auto data_root = [&] {
    if (root.empty()) root = ensure_data(data, work);
    return root;
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"parameter counts", criterion1},
      {"MAC counts", criterion2},
      {"gradient fidelity", criterion3},
      {"reduction equivalence", criterion4},
      {"schedule exactness", criterion5},
      {"loss combiner", criterion6},
      {"ingestion bit-exactness", [&] { return criterion7(data_root()); }},
      {"training smoke", [&] { return criterion8(cli, config, data_root(), work); }},
      {"attention-std diagnostic", criterion9},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int k = static_cast<int>(i + 1);
    if (!wanted(k)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << k << "  " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
