#include "attnwb/cli.hpp"

int main(int argc, char** argv) { return attnwb::cli::run(argc, argv); }
