#include "asa/cli.hpp"

int main(int argc, char** argv) { return asa::cli::dispatch(argc, argv); }
