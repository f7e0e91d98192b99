#include "rattn/metrics.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <vector>

namespace rattn {

namespace {

std::string shortest(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename V>
V parse_field(const std::string& s, const std::string& line) {
  V v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw InvalidInput("metrics row: bad field '" + s + "' in '" + line + "'");
  }
  return v;
}

}  // namespace

std::string format_metrics_row(const EpochRecord& r) {
  return std::to_string(r.epoch) + "," + shortest(r.train_loss) + "," + shortest(r.train_err) + "," +
         shortest(r.test_err) + "," + shortest(r.lr) + "," + shortest(r.seconds);
}

EpochRecord parse_metrics_row(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  for (std::string item; std::getline(ss, item, ',');) f.push_back(item);
  if (f.size() != 6) throw InvalidInput("metrics row: expected 6 fields in '" + line + "'");
  EpochRecord r;
  r.epoch = parse_field<std::size_t>(f[0], line);
  r.train_loss = parse_field<double>(f[1], line);
  r.train_err = parse_field<double>(f[2], line);
  r.test_err = parse_field<double>(f[3], line);
  r.lr = parse_field<double>(f[4], line);
  r.seconds = parse_field<double>(f[5], line);
  return r;
}

void write_metrics_csv(const std::filesystem::path& file, const TrainingHistory& h) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out << kMetricsHeader << "\n";
  for (const auto& r : h.epochs) out << format_metrics_row(r) << "\n";
  if (!out) throw IoError("write failed: " + file.string());
}

void append_metrics_row(const std::filesystem::path& file, const EpochRecord& r) {
  std::ofstream out(file, std::ios::app);
  if (!out) throw IoError("cannot append to " + file.string());
  out << format_metrics_row(r) << "\n";
  if (!out) throw IoError("write failed: " + file.string());
}

TrainingHistory read_metrics_csv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw InvalidInput(file.string() + ": header is not '" + std::string(kMetricsHeader) + "'");
  }
  TrainingHistory h;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    h.epochs.push_back(parse_metrics_row(line));
  }
  return h;
}

}  // namespace rattn
