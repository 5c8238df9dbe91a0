long fl_c1(void) __asm__("_ZN17FrameworkListenerC1EPKc");
long fl_c1(void) { return 0; }
long sl_c2(void) __asm__("_ZN14SocketListenerC2EPKcb");
long sl_c2(void) { return 0; }
long sl_start(void) __asm__("_ZN14SocketListener14startListenerEv");
long sl_start(void) { return 0; }
