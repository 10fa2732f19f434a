// Writes the synthetic exposure-pair fixture used by the tests and smoke runs.

#include "hsds/fixtures.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Generate the toy exposure-pair fixture"};
  std::string dir;
  hsds::ToyFixtureSpec spec;
  app.add_option("dir", dir, "output directory")->required();
  app.add_option("--seed", spec.seed, "scene seed");
  app.add_option("--search-pairs", spec.search_pairs);
  app.add_option("--heldout-pairs", spec.heldout_pairs);
  app.add_option("--natural", spec.natural_images);
  app.add_option("--size", spec.size, "image side");
  CLI11_PARSE(app, argc, argv);
  try {
    hsds::write_toy_fixture(dir, spec);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
