#include "fx.h"

int main(void)
{
    int fd = android_get_control_socket("fwmarkd");
    char buf[16];
    listen(fd, 8);
    for (;;) {
        int c = accept(fd, 0, 0);
        read(c, buf, sizeof buf);
        close(c);
    }
}
