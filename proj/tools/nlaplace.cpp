#include <nlaplace/cli.hpp>

int main(int argc, char** argv)
{
    return nlaplace::cli::run(argc, argv);
}
