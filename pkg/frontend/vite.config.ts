/// <reference types="vitest/config" />
import { defineConfig } from "vite";

export default defineConfig({
  base: "./",
  server: {
    // the python stack owns the API; proxy it during development
    proxy: {
      "/sessions": "http://127.0.0.1:8000",
      "/queries": "http://127.0.0.1:8000",
      "/images": "http://127.0.0.1:8000",
      "/status": "http://127.0.0.1:8000",
    },
  },
  test: {
    environment: "jsdom",
    globals: true,
    setupFiles: ["tests/setup.ts"],
  },
});
