#include "langseg/cli.hpp"

int main(int argc, char** argv) { return langseg::cli::run(argc, argv); }
