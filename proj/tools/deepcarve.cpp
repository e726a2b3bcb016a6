#include "deepcarve/cli.hpp"

int main(int argc, char** argv) { return deepcarve::run_cli(argc, argv); }
