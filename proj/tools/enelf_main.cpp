#include <enelf/cli.hpp>

int main(int argc, char** argv) {
  return enelf::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
