// msdoas command-line entry point
#include <iostream>
#include <string>
#include <vector>

#include "msdoas/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    const msdoas::RunConfig cfg = msdoas::parse_args(args);
    return msdoas::run(cfg);
  } catch (const msdoas::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
