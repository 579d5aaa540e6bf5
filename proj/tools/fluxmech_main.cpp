#include "fluxmech/cli.hpp"

int main(int argc, char** argv) { return fluxmech::run_cli(argc, argv); }
