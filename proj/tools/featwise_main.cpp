#include "featwise/cli.hpp"

int main(int argc, char** argv) { return featwise::run_cli(argc, argv); }
