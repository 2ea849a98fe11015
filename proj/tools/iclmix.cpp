#include "iclmix/cli.hpp"

int main(int argc, char** argv) { return iclmix::run_cli(argc, argv); }
