#include "ctreg/cli.hpp"

int main(int argc, char** argv) { return ctreg::run_cli(argc, argv); }
