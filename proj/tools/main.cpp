#include <string>
#include <vector>

#include "meshsr/cli.hpp"

int main(int argc, char** argv) {
    return meshsr::cli::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
