#include "cvqa/cli.hpp"

int main(int argc, char** argv) { return cvqa::cli::run_cli(argc, argv); }
