#include "hazediff/cli.hpp"

int main(int argc, char** argv) { return hazediff::cli::run_cli(argc, argv); }
