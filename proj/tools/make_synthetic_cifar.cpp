// Writes train.bin / test.bin in the CIFAR-100 binary layout, filled with
// class-conditional synthetic images.
//
//   make_synthetic_cifar --out DIR [--seed N]

#include <iostream>

#include <CLI11.hpp>

#include "rattn/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate a synthetic dataset in the CIFAR-100 binary format", "make_synthetic_cifar"};
  std::string out;
  std::uint64_t seed = 2024;
  app.add_option("--out", out, "output directory")->required();
  app.add_option("--seed", seed, "generator seed");
  CLI11_PARSE(app, argc, argv);
  try {
    rattn::write_synthetic_cifar100(out, seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cout << "wrote train.bin and test.bin to " << out << "\n";
  return 0;
}
