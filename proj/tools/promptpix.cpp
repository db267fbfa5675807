#include "cli.hpp"

int main(int argc, char** argv) { return promptpix::run_cli(argc, argv); }
