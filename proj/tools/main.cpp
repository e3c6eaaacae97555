#include <string>
#include <vector>

#include "reqvec/cli.hpp"

int main(int argc, char** argv) {
  return reqvec::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
