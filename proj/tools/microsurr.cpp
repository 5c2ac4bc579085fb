#include <microsurr/cli.hpp>

int main(int argc, char** argv) { return microsurr::cli::run(argc, argv); }
