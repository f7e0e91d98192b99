#include "rattn/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "rattn/rng.hpp"

namespace rattn {

namespace {

struct ClassPattern {
  double base[3];
  double amp[3];
  double fx, fy;
};

ClassPattern make_pattern(std::size_t cls, std::uint64_t seed) {
  Rng rng(mix_seed(seed, cls));
  ClassPattern p{};
  for (int c = 0; c < 3; ++c) {
    p.base[c] = rng.uniform(0.25, 0.75);
    p.amp[c] = rng.uniform(0.1, 0.25);
  }
  // (cls % 10, cls / 10) spreads the 100 classes over a grid of frequencies.
  p.fx = 0.5 + static_cast<double>(cls % 10) * 0.35;
  p.fy = 0.5 + static_cast<double>(cls / 10) * 0.35;
  return p;
}

}  // namespace

Cifar100Dataset make_synthetic_cifar100(std::size_t records, std::uint64_t class_seed, std::uint64_t image_seed) {
  constexpr std::size_t side = Cifar100Dataset::kSide;
  constexpr double noise = 0.06;
  std::vector<ClassPattern> patterns;
  for (std::size_t k = 0; k < Cifar100Dataset::kFineClasses; ++k) patterns.push_back(make_pattern(k, class_seed));

  Cifar100Dataset d;
  d.pixels.reserve(records * Cifar100Dataset::kImageBytes);
  std::vector<std::uint8_t> chw(Cifar100Dataset::kImageBytes);
  Rng rng(image_seed);
  for (std::size_t i = 0; i < records; ++i) {
    const std::size_t fine = i % Cifar100Dataset::kFineClasses;
    const ClassPattern& p = patterns[fine];
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
          const double t = 2.0 * std::numbers::pi * (p.fx * x + p.fy * y) / side + phase + c;
          const double v = std::clamp(p.base[c] + p.amp[c] * std::sin(t) + noise * rng.normal(), 0.0, 1.0);
          chw[(c * side + y) * side + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
      }
    }
    d.push_back(static_cast<std::uint8_t>(fine / 5), static_cast<std::uint8_t>(fine), chw.data());
  }
  return d;
}

void write_synthetic_cifar100(const std::filesystem::path& dir, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  write_cifar100_file(dir / "train.bin",
                      make_synthetic_cifar100(Cifar100Dataset::kTrainRecords, seed, mix_seed(seed, 1001)));
  write_cifar100_file(dir / "test.bin",
                      make_synthetic_cifar100(Cifar100Dataset::kTestRecords, seed, mix_seed(seed, 1002)));
}

}  // namespace rattn
