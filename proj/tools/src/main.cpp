#include "vemkd_cli/cli.hpp"

int main(int argc, char** argv) { return vemkd::cli::run_cli(argc, argv); }
