#include "dseq/cli.hpp"

int main(int argc, char** argv) { return dseq::run_cli(argc, argv); }
