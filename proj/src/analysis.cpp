#include "rattn/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "rattn/metrics.hpp"

namespace rattn {

namespace fs = std::filesystem;

AccountingReport make_report(std::vector<LayerCost> rows) {
  AccountingReport r;
  r.rows = std::move(rows);
  for (const auto& row : r.rows) {
    r.total_params += row.params;
    r.total_macs += row.macs;
  }
  return r;
}

template <typename T>
AccountingReport count_params(const Model<T>& model) {
  const std::size_t side = Model<T>::min_input_extent(model.spec().stem);
  auto rows = model.layer_costs(Shape{1, side, side, 3});
  for (auto& row : rows) row.macs = 0;
  return make_report(std::move(rows));
}

template <typename T>
AccountingReport count_macs(const Model<T>& model, const std::array<std::size_t, 4>& nchw) {
  const std::size_t min_side = Model<T>::min_input_extent(model.spec().stem);
  if (nchw[0] == 0 || nchw[1] != 3 || nchw[2] < min_side || nchw[3] < min_side) {
    throw InvalidInput("count_macs: input (" + std::to_string(nchw[0]) + "," + std::to_string(nchw[1]) + "," +
                       std::to_string(nchw[2]) + "," + std::to_string(nchw[3]) + ") must be (n>=1, 3, >=" +
                       std::to_string(min_side) + ", >=" + std::to_string(min_side) + ")");
  }
  return make_report(model.layer_costs(Shape{nchw[0], nchw[2], nchw[3], nchw[1]}));
}

std::string format_report(const AccountingReport& r, bool per_layer) {
  std::ostringstream out;
  char line[256];
  if (per_layer) {
    std::snprintf(line, sizeof line, "%-40s %-10s %14s %16s\n", "layer", "kind", "params", "macs");
    out << line;
    for (const auto& row : r.rows) {
      std::snprintf(line, sizeof line, "%-40s %-10s %14llu %16llu\n", row.name.c_str(), row.kind.c_str(),
                    static_cast<unsigned long long>(row.params), static_cast<unsigned long long>(row.macs));
      out << line;
    }
  }
  std::snprintf(line, sizeof line, "total params %llu (%.3fM)\ntotal macs   %llu (%.3fG)\n",
                static_cast<unsigned long long>(r.total_params), static_cast<double>(r.total_params) / 1e6,
                static_cast<unsigned long long>(r.total_macs), static_cast<double>(r.total_macs) / 1e9);
  out << line;
  return out.str();
}

void write_report_csv(const fs::path& file, const AccountingReport& r) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out << "layer,kind,params,macs\n";
  for (const auto& row : r.rows) out << row.name << "," << row.kind << "," << row.params << "," << row.macs << "\n";
  out << "total,total," << r.total_params << "," << r.total_macs << "\n";
  if (!out) throw IoError("write failed: " + file.string());
}

template <typename T>
double mean_channel_std(const Tensor<T>& s) {
  const std::size_t N = s.n(), C = s.c();
  if (N == 0 || C == 0 || s.size() != N * C) throw InvalidInput("attention std: s must be (batch, 1, 1, channels)");
  double total = 0.0;
  for (std::size_t b = 0; b < N; ++b) {
    const T* row = s.data() + b * C;
    double mean = 0.0;
    for (std::size_t c = 0; c < C; ++c) mean += row[c];
    mean /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) var += (row[c] - mean) * (row[c] - mean);
    total += std::sqrt(var / static_cast<double>(C));
  }
  return total / static_cast<double>(N);
}

AttentionStdSeries attention_std_report(Model<float>& model, const FeatureMap<float>& batch, int stage) {
  if (stage < 1 || stage > 4) throw InvalidInput("attention report: stage " + std::to_string(stage) + " not in 1..4");
  const auto units = model.attention_units(stage);
  if (units.empty()) throw InvalidInput("attention report: stage " + std::to_string(stage) + " has no SE units");
  model.forward(batch, Pass::eval());
  AttentionStdSeries out;
  out.stage = stage;
  out.batch = batch.n();
  for (const auto* u : units) {
    out.modules.push_back(u->name());
    out.mean_std.push_back(mean_channel_std(u->weights()));
  }
  out.min_index = static_cast<std::size_t>(std::min_element(out.mean_std.begin(), out.mean_std.end()) -
                                           out.mean_std.begin());
  out.max_index = static_cast<std::size_t>(std::max_element(out.mean_std.begin(), out.mean_std.end()) -
                                           out.mean_std.begin());
  return out;
}

namespace {

std::string mark(const AttentionStdSeries& s, std::size_t i) {
  if (i == s.min_index && i == s.max_index) return " min+max";
  if (i == s.min_index) return " min";
  if (i == s.max_index) return " max";
  return "";
}

}  // namespace

void write_attention_csv(const fs::path& file, const AttentionStdSeries& s) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out << "module,mean_std\n";
  char buf[64];
  for (std::size_t i = 0; i < s.modules.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g", s.mean_std[i]);
    out << s.modules[i] << "," << buf << "\n";
  }
  if (!out) throw IoError("write failed: " + file.string());
}

std::string format_attention_report(const AttentionStdSeries& s) {
  std::ostringstream out;
  out << "stage " << s.stage << ", " << s.batch << " inputs\n";
  char line[160];
  for (std::size_t i = 0; i < s.modules.size(); ++i) {
    std::snprintf(line, sizeof line, "  %-28s %.6f%s\n", s.modules[i].c_str(), s.mean_std[i], mark(s, i).c_str());
    out << line;
  }
  return out.str();
}

// ---------------------------------------------------------------- plot

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Round step for about `target` ticks over [0, span].
double tick_step(double span, int target) {
  const double raw = span / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (raw <= m * mag) return m * mag;
  return 10.0 * mag;
}

}  // namespace

std::string render_error_plot(const std::vector<LabeledHistory>& runs, const std::string& title) {
  if (runs.empty()) throw InvalidInput("plot: no histories");
  std::size_t max_epoch = 1;
  double max_err = 1.0;
  for (const auto& r : runs) {
    if (r.history.epochs.empty()) throw InvalidInput("plot: history '" + r.label + "' is empty");
    for (const auto& e : r.history.epochs) {
      max_epoch = std::max(max_epoch, e.epoch);
      max_err = std::max({max_err, e.test_err, e.train_err});
    }
  }
  const double W = 760, H = 460, left = 60, right = 180, top = 40, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  const double ystep = tick_step(max_err, 5), ymax = std::ceil(max_err / ystep) * ystep;
  const double xmin = 1.0, xmax = std::max<double>(2.0, static_cast<double>(max_epoch));
  auto X = [&](double e) { return left + (e - xmin) / (xmax - xmin) * pw; };
  auto Y = [&](double v) { return top + (1.0 - v / ymax) * ph; };

  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty()) s << "<text x=\"" << left << "\" y=\"24\" font-size=\"15\">" << xml_escape(title) << "</text>\n";
  for (double v = 0; v <= ymax + 1e-9; v += ystep) {
    s << "<line x1=\"" << left << "\" y1=\"" << Y(v) << "\" x2=\"" << left + pw << "\" y2=\"" << Y(v)
      << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << left - 6 << "\" y=\"" << Y(v) + 4 << "\" text-anchor=\"end\">" << v << "</text>\n";
  }
  const double xstep = std::max(1.0, tick_step(xmax - xmin, 8));
  for (double e = xmin; e <= xmax + 1e-9; e += xstep) {
    s << "<text x=\"" << X(e) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << e << "</text>\n";
  }
  s << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  s << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">epoch</text>\n";
  s << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">error (%)</text>\n";

  for (std::size_t i = 0; i < runs.size(); ++i) {
    const char* colour = kPalette[i % std::size(kPalette)];
    for (int which = 0; which < 2; ++which) {
      s << "<polyline class=\"series\" data-label=\"" << xml_escape(runs[i].label) << (which ? " train" : " test")
        << "\" fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.6\""
        << (which ? " stroke-dasharray=\"5,3\"" : "") << " points=\"";
      for (const auto& e : runs[i].history.epochs) {
        s << X(static_cast<double>(e.epoch)) << "," << Y(which ? e.train_err : e.test_err) << " ";
      }
      s << "\"/>\n";
    }
    const double ly = top + 14 + 36.0 * static_cast<double>(i);
    s << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 36 << "\" y2=\"" << ly
      << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << left + pw + 42 << "\" y=\"" << ly + 4 << "\">" << xml_escape(runs[i].label)
      << " test</text>\n";
    s << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly + 16 << "\" x2=\"" << left + pw + 36 << "\" y2=\""
      << ly + 16 << "\" stroke=\"" << colour << "\" stroke-width=\"2\" stroke-dasharray=\"5,3\"/>\n";
    s << "<text x=\"" << left + pw + 42 << "\" y=\"" << ly + 20 << "\">" << xml_escape(runs[i].label)
      << " train</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

namespace {

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out << text;
  if (!out) throw IoError("write failed: " + file.string());
}

}  // namespace

void emit_curves(const TrainingHistory& history, const fs::path& stem, const std::string& label) {
  if (history.epochs.empty()) throw InvalidInput("emit_curves: empty history");
  fs::path csv = stem, svg = stem;
  csv += ".csv";
  svg += ".svg";
  write_metrics_csv(csv, history);
  write_text(svg, render_error_plot({{label, history}}));
}

void emit_overlay(const std::vector<LabeledHistory>& runs, const fs::path& svg_file, const std::string& title) {
  write_text(svg_file, render_error_plot(runs, title));
}

template AccountingReport count_params<float>(const Model<float>&);
template AccountingReport count_params<double>(const Model<double>&);
template AccountingReport count_macs<float>(const Model<float>&, const std::array<std::size_t, 4>&);
template AccountingReport count_macs<double>(const Model<double>&, const std::array<std::size_t, 4>&);
template double mean_channel_std<float>(const Tensor<float>&);
template double mean_channel_std<double>(const Tensor<double>&);

}  // namespace rattn
