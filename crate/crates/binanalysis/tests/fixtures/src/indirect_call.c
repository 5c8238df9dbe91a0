#include "fx.h"

static int one(void) { return listen(3, 1); }
static int two(void) { return listen(4, 1); }
static int (*const table[2])(void) = { one, two };

int main(int argc, char **argv)
{
    (void)argv;
    return table[argc & 1]();
}
