#include "lensveil/cli.hpp"

int main(int argc, char** argv) { return lensveil::cli::run_cli(argc, argv); }
