#include <CLI11.hpp>

#include <cstdio>

int main(int argc, char** argv) {
  CLI::App app{"energy-decay laboratory for damped waves on warped surfaces"};
  app.require_subcommand(1);
  auto* run = app.add_subcommand("run", "run scenario tasks");
  auto* validate = app.add_subcommand("validate", "check a scenario file");
  auto* report = app.add_subcommand("report", "render a manifest summary");
  (void)run;
  (void)validate;
  (void)report;
  CLI11_PARSE(app, argc, argv);
  std::fprintf(stderr, "not implemented yet\n");
  return 1;
}
