#include "fx.h"

int main(void)
{
    struct listener l;
    SocketListener_new(&l, "vold", 1);
    return listener_start(&l);
}
