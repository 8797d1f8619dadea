#include "ssmavs/harness.hpp"

int main(int argc, char** argv) { return ssmavs::cli_main(argc, argv); }
