#include "dsf/cli.hpp"

int main(int argc, char** argv) {
  return dsf::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
