#include "partmim/cli.hpp"

int main(int argc, char** argv) { return partmim::run_cli(argc, argv); }
