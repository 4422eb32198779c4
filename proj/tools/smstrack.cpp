#include "smstrack/cli.hpp"

int main(int argc, char** argv) { return smstrack::cli::run(argc, argv); }
