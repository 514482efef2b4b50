#include "introspect/cli.hpp"

int main(int argc, char** argv) { return introspect::cli::run_cli(argc, argv); }
