#include "docalign/cli.hpp"

int main(int argc, char** argv) { return docalign::cli::run(argc, argv); }
