/**
 * Thin socket abstraction so the session logic runs on a browser WebSocket
 * in production and on any compatible implementation (Node's `ws`, a fake)
 * in tests.
 */

export interface ConsoleSocket {
  send(text: string): void;
  close(): void;
  onOpen(handler: () => void): void;
  onMessage(handler: (text: string) => void): void;
  onClose(handler: () => void): void;
}

export type SocketFactory = (url: string) => ConsoleSocket;

/** Adapter over the standard browser WebSocket. */
export function browserSocketFactory(url: string): ConsoleSocket {
  const ws = new WebSocket(url);
  return {
    send: (text) => ws.send(text),
    close: () => ws.close(),
    onOpen: (handler) => ws.addEventListener("open", () => handler()),
    onMessage: (handler) =>
      ws.addEventListener("message", (event) => {
        if (typeof event.data === "string") handler(event.data);
      }),
    onClose: (handler) => ws.addEventListener("close", () => handler()),
  };
}
