#include "oanet/cli.hpp"

int main(int argc, char** argv) { return oanet::cli::dispatch(argc, argv); }
